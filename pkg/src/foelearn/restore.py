"""Denoising, inpainting, deblurring and super-resolution with a trained prior.

Each task picks a data operator ``K`` and a data weight ``lambda`` and then
minimizes the prior energy plus ``lambda/2 ||K u - f||^2`` from the
operator's warm start.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .energy import Blur, DownsampleBlur, EnergyModel, Identity, Mask, solve_lower
from .errors import ParameterError
from .imagecore import as_image

__all__ = [
    "RestoreTask",
    "RestoreResult",
    "default_lambda",
    "denoise_multiplier",
    "motion_kernel",
    "restore",
    "TASKS",
]

log = logging.getLogger(__name__)

TASKS = ("denoise", "inpaint", "deblur", "superres")

# (sigma, multiplier) knots; flat outside, piecewise linear inside
_SIGMA_KNOTS = (20.0, 25.0, 40.0)
_MULT_KNOTS = (1.15, 1.0, 0.8)
INPAINT_LAMBDA = 1e3


@dataclass(frozen=True, eq=False)
class RestoreTask:
    """What to restore and how the observation was formed.

    ``denoise`` and ``deblur`` need ``sigma``; ``inpaint`` needs ``mask``
    (1 = observed); ``deblur`` needs ``kernel``; ``superres`` needs
    ``factor`` and optionally ``kernel`` (default box blur). ``lam``
    overrides the default data weight.
    """

    kind: str
    sigma: float = None
    mask: np.ndarray = None
    kernel: np.ndarray = None
    factor: int = None
    lam: float = None

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ParameterError(f"unknown task {self.kind!r}; choose from {TASKS}")
        if self.sigma is not None and not self.sigma >= 0:
            raise ParameterError("sigma must be nonnegative")
        if self.lam is not None and not (np.isfinite(self.lam) and self.lam > 0):
            raise ParameterError("lambda override must be finite and positive")
        if self.kind == "inpaint" and self.mask is None:
            raise ParameterError("inpainting needs a mask")
        if self.kind == "deblur" and self.kernel is None:
            raise ParameterError("deblurring needs a blur kernel")
        if self.kind == "superres" and self.factor is None:
            raise ParameterError("super-resolution needs a factor")
        # build once so invalid masks or kernels fail here
        object.__setattr__(self, "_K", self._make_operator())

    def _make_operator(self):
        if self.kind == "denoise":
            return Identity()
        if self.kind == "inpaint":
            return Mask(self.mask)
        if self.kind == "deblur":
            return Blur(self.kernel)
        return DownsampleBlur(self.factor, self.kernel)

    @property
    def operator(self):
        return self._K


def denoise_multiplier(sigma):
    """Multiplier ``c`` in ``lambda = c * 25 / sigma`` for denoising."""
    return float(np.interp(sigma, _SIGMA_KNOTS, _MULT_KNOTS))


def default_lambda(task):
    """Data weight for ``task`` unless it carries an explicit override."""
    if task.lam is not None:
        return float(task.lam)
    if task.kind == "inpaint":
        return INPAINT_LAMBDA
    if task.sigma is None or task.sigma == 0:
        raise ParameterError(
            f"{task.kind} with sigma = {task.sigma} has no finite default lambda; pass lam explicitly")
    if task.kind == "denoise":
        return 25.0 / task.sigma * denoise_multiplier(task.sigma)
    return 25.0 / task.sigma


def motion_kernel(length, angle=0.0):
    """Normalized linear motion blur of ``length`` pixels at ``angle`` degrees.

    The kernel is the smallest odd square holding the segment. The segment
    is sampled densely at interval midpoints and each sample is assigned to
    its nearest pixel, so a horizontal integer length gives equal taps.
    """
    if length < 1:
        raise ParameterError("motion length must be >= 1")
    k = int(np.ceil(length)) | 1
    c = k // 2
    th = np.deg2rad(angle)
    n = 64 * k
    t = -length / 2 + (np.arange(n) + 0.5) * (length / n)
    y = np.rint(c - t * np.sin(th)).astype(int)
    x = np.rint(c + t * np.cos(th)).astype(int)
    out = np.zeros((k, k))
    np.add.at(out, (np.clip(y, 0, k - 1), np.clip(x, 0, k - 1)), 1.0)
    return out / out.sum()


@dataclass
class RestoreResult:
    u: np.ndarray
    lam: float
    converged: bool
    diagnostics: object

    def as_dict(self):
        d = {"lambda": self.lam, "converged": self.converged}
        d.update(self.diagnostics.as_dict())
        return d


def restore(model, task, f, gtol=1e-3, maxiter=50000):
    """Minimize the task energy for observation ``f``.

    Returns a :class:`RestoreResult`; a solve that stops early is logged and
    flagged via ``converged`` but still returned.
    """
    f = as_image(f, "f")
    K = task.operator
    lam = default_lambda(task)
    m = EnergyModel(model.filters, model.penalty, K=K, lam=lam)
    u, diag = solve_lower(m, f, gtol=gtol, maxiter=maxiter)
    if not diag.converged:
        log.warning("%s: restoration flagged as not converged", task.kind)
    return RestoreResult(u=u, lam=lam, converged=diag.converged, diagnostics=diag)
