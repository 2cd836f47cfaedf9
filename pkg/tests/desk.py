"""Desk-scale data shared by the slow tests and the acceptance suite.

Training patches come from the grayscale scikit-image sample images,
held-out crops from the color ones (converted to gray), so the two sets
never share a source image.
"""

from functools import lru_cache

import numpy as np

from foelearn import add_gaussian_noise, sample_patches
from foelearn.bilevel import TrainConfig, TrainingSample

SIGMA = 25.0
TRAIN_NAMES = ("camera", "coins", "moon", "page", "text", "clock", "brick", "gravel",
               "grass", "cell")
HELDOUT_NAMES = ("astronaut", "coffee", "chelsea", "rocket")
HELDOUT_CROP = 96


def _gray(name):
    from skimage import color, data
    im = getattr(data, name)()
    if im.ndim == 3:
        im = np.rint(color.rgb2gray(im[..., :3]) * 255.0)
    return im.astype(np.float64)


@lru_cache(maxsize=None)
def train_images():
    return tuple(_gray(n) for n in TRAIN_NAMES)


def center_crop(im, size):
    y0 = (im.shape[0] - size) // 2
    x0 = (im.shape[1] - size) // 2
    return im[y0:y0 + size, x0:x0 + size].copy()


def heldout_crop(name, size=HELDOUT_CROP):
    """Central ``size`` x ``size`` crop of a held-out image."""
    return center_crop(_gray(name), size)


@lru_cache(maxsize=None)
def heldout_pairs(seed=7):
    out = []
    for i, name in enumerate(HELDOUT_NAMES):
        g = heldout_crop(name)
        out.append((add_gaussian_noise(g, SIGMA, [seed, i]), g))
    return tuple(out)


@lru_cache(maxsize=None)
def train_samples(count=20, patch=32, seed=0):
    patches = sample_patches(list(train_images()), patch, count, seed)
    return tuple(TrainingSample(add_gaussian_noise(g, SIGMA, [seed, i]), g)
                 for i, g in enumerate(patches))


# One protocol for every penalty and mode. Filters start as DCT atoms of
# norm 0.1 with weight 16; each outer step may change the parameter vector
# by at most 5% of its norm, which keeps every lower problem solvable.
PROTOCOL = dict(kernel_size=5, n_filters=8, init="dct", init_norm=0.1, init_weight=16.0,
                outer_max_step_rel=0.05, outer_maxiter=20, seed=0)


def desk_config(**kw):
    base = dict(PROTOCOL, penalty="logsq", mode="free")
    base.update(kw)
    return TrainConfig(**base)


# Measured once on this seed and protocol, rounded down, and kept as
# regression floors (dB of gain over the respective baseline).
FLOORS = {
    "logsq_gain_db": 6.8,
    "inpaint_gain_db": 6.7,
    "superres_gain_db": 2.9,
    "deblur_gain_db": 2.0,
}


def heldout_psnr(model, maxiter=50000):
    """Mean PSNR of the noisy held-out crops and of their restorations."""
    from foelearn import psnr
    from foelearn.restore import RestoreTask, restore
    noisy, out = [], []
    for f, g in heldout_pairs():
        r = restore(model, RestoreTask("denoise", sigma=SIGMA), f, maxiter=maxiter)
        noisy.append(psnr(f, g))
        out.append(psnr(r.u, g))
    return float(np.mean(noisy)), float(np.mean(out))
