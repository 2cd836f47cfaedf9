"""Learning analysis-operator (Fields-of-Experts) image priors by bi-level optimization."""

from ._kernels import BACKEND
from .bilevel import TrainConfig, TrainingSample, init_filterbank, loss, param_grad, train
from .energy import (
    Blur,
    DownsampleBlur,
    EnergyModel,
    FilterBank,
    FoEModel,
    Identity,
    Mask,
    energy_and_grad,
    grad_u,
    hess_vec,
    solve_lower,
)
from .imagecore import (
    add_gaussian_noise,
    conv2_adjoint,
    conv2_sym,
    dct_basis,
    load_image,
    psnr,
    sample_patches,
    save_image,
)
from .penalty import Penalty

__version__ = "0.1.0"
