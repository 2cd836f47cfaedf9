"""Images, symmetric-boundary correlation, the DCT filter basis, metrics and IO.

Images are 2-D ``float64`` arrays indexed ``[row, col]``; kernels are odd
``k x k`` arrays. ``conv2_sym`` is a *correlation* (the kernel is not
flipped) over a half-sample symmetric extension of the image, so it is the
sparse matrix ``A`` acting on ``vec(u)``. ``conv2_adjoint`` is exactly
``A^T``.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DimensionError, ImageIOError, ParameterError

__all__ = [
    "BasisSet",
    "as_image",
    "check_kernel",
    "conv2_sym",
    "conv2_adjoint",
    "correlate_bank",
    "correlate_adjoint_bank",
    "dct_basis",
    "psnr",
    "mse",
    "add_gaussian_noise",
    "sample_patches",
    "load_image",
    "save_image",
    "load_array",
]


def as_image(u, name="image"):
    """Validate and convert to a finite 2-D float64 array."""
    a = np.asarray(u, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError(f"{name} contains non-finite values")
    return a


def check_kernel(a, image_shape=None):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] % 2 == 0:
        raise DimensionError(f"kernel must be square with odd side, got shape {a.shape}")
    if image_shape is not None and a.shape[0] > min(image_shape):
        raise DimensionError(
            f"kernel of size {a.shape[0]} larger than image {image_shape}")
    return a


def _check_bank(kernels, image_shape):
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 3:
        raise DimensionError("kernel bank must have shape (n, k, k)")
    check_kernel(kernels[0] if len(kernels) else np.zeros((1, 1)), image_shape)
    return kernels


def correlate_bank(u, kernels):
    """Responses of every kernel in ``kernels`` (n, k, k) -> (n, H, W)."""
    u = as_image(u)
    kernels = _check_bank(kernels, u.shape)
    return _kernels.correlate_bank(u, kernels)


def correlate_adjoint_bank(v, kernels, weights=None):
    """Weighted sum of adjoints: ``sum_i w_i A_i^T v_i`` for v of shape (n, H, W)."""
    v = np.asarray(v, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] != kernels.shape[0]:
        raise DimensionError("responses must have shape (n, H, W) matching the bank")
    _check_bank(kernels, v.shape[1:])
    if weights is None:
        weights = np.ones(len(kernels))
    return _kernels.correlate_adjoint_bank(v, kernels, np.asarray(weights, dtype=np.float64))


def conv2_sym(u, a):
    """Correlate ``u`` with kernel ``a`` under symmetric boundary extension."""
    u = as_image(u)
    a = check_kernel(a, u.shape)
    return _kernels.correlate_bank(u, a[None])[0]


def conv2_adjoint(v, a):
    """Apply the transpose of :func:`conv2_sym` for the same kernel."""
    v = as_image(v)
    a = check_kernel(a, v.shape)
    return _kernels.correlate_adjoint_bank(v[None], a[None], np.ones(1))


@dataclass(frozen=True)
class BasisSet:
    """Orthonormal zero-mean filter atoms, shape ``(k*k - 1, k, k)``."""

    k: int
    atoms: np.ndarray

    @property
    def size(self):
        return self.atoms.shape[0]

    def matrix(self):
        """Atoms flattened to rows, shape ``(N_B, k*k)``."""
        return self.atoms.reshape(self.size, -1)


def _dct_1d(k):
    x = np.arange(k)
    c = np.cos(np.pi * (2 * x[None, :] + 1) * np.arange(k)[:, None] / (2 * k))
    c *= np.sqrt(2.0 / k)
    c[0] /= np.sqrt(2.0)
    return c


def dct_basis(k):
    """2-D DCT-II atoms of side ``k`` without the constant atom.

    Atoms are ordered by increasing total frequency ``p + q`` (ties by ``p``)
    and re-orthonormalized with modified Gram-Schmidt.
    """
    if not isinstance(k, (int, np.integer)) or k < 3 or k % 2 == 0:
        raise ParameterError(f"DCT basis size must be an odd integer >= 3, got {k!r}")
    c = _dct_1d(k)
    pairs = sorted(((p, q) for p in range(k) for q in range(k) if p or q),
                   key=lambda pq: (pq[0] + pq[1], pq[0], pq[1]))
    vecs = np.array([np.outer(c[p], c[q]).ravel() for p, q in pairs])
    # Gram-Schmidt against the constant too, so the zero-mean property is exact to rounding.
    const = np.full(k * k, 1.0 / k)
    out = np.empty_like(vecs)
    for i, v in enumerate(vecs):
        v = v - (v @ const) * const
        for j in range(i):
            v = v - (v @ out[j]) * out[j]
        out[i] = v / np.linalg.norm(v)
    return BasisSet(k=int(k), atoms=out.reshape(-1, k, k))


def mse(u, g):
    u, g = as_image(u), as_image(g)
    if u.shape != g.shape:
        raise DimensionError(f"shape mismatch {u.shape} vs {g.shape}")
    return float(np.mean((u - g) ** 2))


def psnr(u, g):
    """Peak signal-to-noise ratio for peak 255; ``inf`` when the images coincide."""
    m = mse(u, g)
    if m == 0.0:
        return float("inf")
    return float(20.0 * np.log10(255.0 / np.sqrt(m)))


def add_gaussian_noise(u, sigma, seed):
    """Add i.i.d. N(0, sigma^2) noise; no clamping."""
    u = as_image(u)
    if sigma < 0:
        raise ParameterError("sigma must be nonnegative")
    if sigma == 0:
        return u.copy()
    rng = np.random.default_rng(seed)
    return u + sigma * rng.standard_normal(u.shape)


def sample_patches(images, patch, count, seed):
    """Random ``patch x patch`` crops, cycling through ``images`` in order.

    Crop ``i`` comes from ``images[i % len(images)]`` at a uniformly random
    position, so ``count == len(images)`` gives one crop per image.
    """
    if not images:
        raise ParameterError("need at least one image")
    if patch < 1 or count < 0:
        raise ParameterError("patch must be >= 1 and count >= 0")
    images = [as_image(im) for im in images]
    for im in images:
        if im.shape[0] < patch or im.shape[1] < patch:
            raise DimensionError(f"image {im.shape} smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        im = images[i % len(images)]
        y = int(rng.integers(0, im.shape[0] - patch + 1))
        x = int(rng.integers(0, im.shape[1] - patch + 1))
        out.append(im[y:y + patch, x:x + patch].copy())
    return out


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def _pgm_tokens(data):
    """Yield (token, end offset) for the whitespace/comment separated header."""
    pos = 0
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            yield data[start:pos], pos


def _read_pgm(path):
    data = Path(path).read_bytes()
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
        if magic not in (b"P2", b"P5"):
            raise ImageIOError(f"{path}: not a graymap (magic {magic!r})")
        w = int(next(tokens)[0])
        h = int(next(tokens)[0])
        maxval_tok, end = next(tokens)
        maxval = int(maxval_tok)
    except (StopIteration, ValueError) as exc:
        raise ImageIOError(f"{path}: malformed graymap header") from exc
    if not 0 < maxval < 65536:
        raise ImageIOError(f"{path}: invalid maxval {maxval}")
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        raw = data[end + 1:]
        count = w * h
        arr = np.frombuffer(raw, dtype=dtype, count=count) if len(raw) >= count * np.dtype(dtype).itemsize else None
        if arr is None:
            raise ImageIOError(f"{path}: truncated pixel data")
    else:
        vals = [int(t) for t, _ in tokens]
        if len(vals) < w * h:
            raise ImageIOError(f"{path}: truncated pixel data")
        arr = np.array(vals[:w * h])
    img = arr.reshape(h, w).astype(np.float64)
    if maxval != 255:
        img *= 255.0 / maxval
    return img


def _write_pgm(path, q, binary=True):
    h, w = q.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.astype(np.uint8).tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n255\n".encode("ascii"))
            for row in q:
                fh.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


def load_image(path, convert=False):
    """Read an 8-bit grayscale PGM (P2/P5) or PNG as float64 in [0, 255].

    Color PNGs are rejected unless ``convert`` is true.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if not path.is_file():
        raise ImageIOError(f"cannot read {path}")
    if suffix in (".pgm", ".pnm"):
        return _read_pgm(path)
    if suffix == ".png":
        try:
            from PIL import Image as PILImage
        except ImportError as exc:  # pragma: no cover
            raise ImageIOError("PNG support requires Pillow") from exc
        try:
            with PILImage.open(path) as im:
                if im.mode not in ("L", "I;16", "I"):
                    if not convert:
                        raise ImageIOError(f"{path}: not grayscale (mode {im.mode})")
                    im = im.convert("L")
                arr = np.asarray(im, dtype=np.float64)
                if im.mode in ("I;16", "I"):
                    arr *= 255.0 / 65535.0
        except OSError as exc:
            raise ImageIOError(f"{path}: {exc}") from exc
        return arr
    raise ImageIOError(f"unsupported image format: {suffix or path.name}")


def save_image(path, u, binary=True):
    """Write rounded, clamped 8-bit grayscale (PGM or PNG by extension)."""
    path = Path(path)
    q = np.clip(np.rint(as_image(u)), 0, 255).astype(np.uint8)
    suffix = path.suffix.lower()
    try:
        if suffix in (".pgm", ".pnm"):
            _write_pgm(path, q, binary=binary)
        elif suffix == ".png":
            from PIL import Image as PILImage
            PILImage.fromarray(q, mode="L").save(path)
        else:
            raise ImageIOError(f"unsupported image format: {suffix or path.name}")
    except OSError as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_array(path):
    """Load an image file or a float ``.npy`` array (used for unclamped noisy data)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        try:
            return as_image(np.load(path))
        except (OSError, ValueError) as exc:
            raise ImageIOError(f"cannot read {path}: {exc}") from exc
    return load_image(path)
