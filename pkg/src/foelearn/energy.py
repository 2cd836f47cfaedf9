"""Analysis-prior energy, its derivatives and the lower-level MAP solver.

The energy of an image ``u`` given data ``f`` is::

    E(u) = sum_i alpha_i sum_p phi((A_i u)_p) + lam/2 ||K u - f||^2

where ``A_i`` is correlation with kernel ``sum_j beta_ij B_j`` under
symmetric boundaries and ``K`` is one of the data operators below.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionError, NotConvergedError, ParameterError, UnsupportedConfiguration
from .imagecore import (
    BasisSet,
    as_image,
    check_kernel,
    conv2_adjoint,
    conv2_sym,
    correlate_adjoint_bank,
    correlate_bank,
)
from .penalty import Penalty
from .solvers import LbfgsOptions, lbfgs

__all__ = [
    "FilterBank",
    "FoEModel",
    "DataOperator",
    "Identity",
    "Mask",
    "Blur",
    "DownsampleBlur",
    "EnergyModel",
    "LowerDiagnostics",
    "assemble",
    "energy",
    "grad_u",
    "energy_and_grad",
    "hess_vec",
    "solve_lower",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FilterBank:
    """``n`` filters ``A_i = sum_j beta[i, j] B_j`` with weights ``alpha[i] >= 0``."""

    basis: BasisSet
    beta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        alpha = np.array(self.alpha, dtype=np.float64).ravel()
        if beta.ndim != 2 or beta.shape[1] != self.basis.size:
            raise DimensionError(
                f"beta must have shape (n, {self.basis.size}), got {beta.shape}")
        if alpha.shape != (beta.shape[0],):
            raise DimensionError("alpha must have one entry per filter")
        if np.any(alpha < 0):
            raise ParameterError("filter weights alpha must be nonnegative")
        beta.flags.writeable = False
        alpha.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)

    @property
    def n(self):
        return self.beta.shape[0]

    @property
    def k(self):
        return self.basis.k

    @cached_property
    def kernels(self):
        return assemble(self)

    def norms(self):
        return np.linalg.norm(self.kernels.reshape(self.n, -1), axis=1)


@dataclass(frozen=True, eq=False)
class FoEModel:
    """A trained prior: filter bank plus the penalty it was trained with."""

    filters: FilterBank
    penalty: Penalty
    provenance: dict = field(default_factory=dict)


def assemble(filters):
    """Kernels ``sum_j beta_ij B_j`` as an ``(n, k, k)`` array."""
    beta = np.asarray(filters.beta)
    if beta.ndim != 2 or beta.shape[1] != filters.basis.size:
        raise DimensionError("beta does not match basis size")
    k = filters.basis.k
    return (beta @ filters.basis.matrix()).reshape(-1, k, k)


# ---------------------------------------------------------------------------
# data operators
# ---------------------------------------------------------------------------

class DataOperator:
    """Linear map from image space (domain) to observation space (range)."""

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, y):
        raise NotImplementedError

    def range_shape(self, shape):
        return tuple(shape)

    def domain_shape(self, shape):
        return tuple(shape)

    def has_nullspace(self):
        return False

    def warm_start(self, f):
        """Deterministic initial image for the lower-level solve."""
        return np.array(f, dtype=np.float64)

    @property
    def is_identity(self):
        return False


class Identity(DataOperator):
    def apply(self, x):
        return x

    def adjoint(self, y):
        return y

    @property
    def is_identity(self):
        return True

    def __repr__(self):
        return "Identity()"


class Mask(DataOperator):
    """Keep observed pixels (mask == 1); observation space has image shape."""

    def __init__(self, mask):
        m = np.asarray(mask, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError("mask must be 2-D")
        if not np.all((m == 0) | (m == 1)):
            raise ParameterError("mask values must be 0 or 1")
        self.mask = m

    def _check(self, x):
        if x.shape != self.mask.shape:
            raise DimensionError(f"mask shape {self.mask.shape} does not match {x.shape}")

    def apply(self, x):
        self._check(x)
        return self.mask * x

    def adjoint(self, y):
        self._check(y)
        return self.mask * y

    def has_nullspace(self):
        return bool(np.any(self.mask == 0))

    def warm_start(self, f):
        f = np.asarray(f, dtype=np.float64)
        self._check(f)
        obs = self.mask == 1
        fill = float(f[obs].mean()) if np.any(obs) else 0.0
        return np.where(obs, f, fill)


class Blur(DataOperator):
    """Convolution (flipped correlation) with a normalized kernel, symmetric boundaries."""

    def __init__(self, kernel):
        kern = check_kernel(kernel)
        if abs(kern.sum() - 1.0) > 1e-10:
            raise ParameterError("blur kernel taps must sum to 1")
        self.kernel = kern
        self._flipped = np.ascontiguousarray(kern[::-1, ::-1])

    def apply(self, x):
        return conv2_sym(x, self._flipped)

    def adjoint(self, y):
        return conv2_adjoint(y, self._flipped)


class DownsampleBlur(DataOperator):
    """Blur followed by keeping the centre pixel of every ``factor x factor`` cell.

    Image dimensions must be multiples of ``factor``. With the default box
    kernel and an odd factor each observation is the mean of its cell.
    """

    def __init__(self, factor, kernel=None):
        if int(factor) != factor or factor < 2:
            raise ParameterError("downsampling factor must be an integer >= 2")
        self.factor = int(factor)
        if kernel is None:
            kernel = box_kernel(self.factor if self.factor % 2 else self.factor + 1)
        self.blur = Blur(kernel)
        self.offset = self.factor // 2

    def apply(self, x):
        if x.shape[0] % self.factor or x.shape[1] % self.factor:
            raise DimensionError(f"image {x.shape} not divisible by factor {self.factor}")
        o = self.offset
        return self.blur.apply(x)[o::self.factor, o::self.factor]

    def adjoint(self, y):
        up = np.zeros(self.domain_shape(y.shape))
        up[self.offset::self.factor, self.offset::self.factor] = y
        return self.blur.adjoint(up)

    def range_shape(self, shape):
        H, W = shape
        return (H // self.factor, W // self.factor)

    def domain_shape(self, shape):
        h, w = shape
        return (h * self.factor, w * self.factor)

    def has_nullspace(self):
        return True

    def warm_start(self, f):
        f = np.asarray(f, dtype=np.float64)
        return np.repeat(np.repeat(f, self.factor, axis=0), self.factor, axis=1)


def box_kernel(k):
    return np.full((k, k), 1.0 / (k * k))


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnergyModel:
    filters: FilterBank
    penalty: Penalty
    K: DataOperator = field(default_factory=Identity)
    lam: float = 1.0

    def __post_init__(self):
        lam = float(self.lam)
        if not lam >= 0 or not np.isfinite(lam):
            raise ParameterError("lambda must be finite and nonnegative")
        if lam == 0 and self.K.has_nullspace():
            raise ParameterError(
                "lambda must be positive when the data operator has a nullspace")
        object.__setattr__(self, "lam", lam)

    @property
    def kernels(self):
        return self.filters.kernels

    @property
    def alpha(self):
        return self.filters.alpha


def _check_pair(m, u, f):
    u = as_image(u, "u")
    f = as_image(f, "f")
    K = m.K
    if K.domain_shape(f.shape) != u.shape or K.range_shape(u.shape) != f.shape:
        raise DimensionError(f"image {u.shape} inconsistent with data {f.shape} under {K!r}")
    return u, f, K


def energy_and_grad(m, u, f):
    """Energy and gradient in one pass."""
    u, f, K = _check_pair(m, u, f)
    resp = correlate_bank(u, m.kernels)
    val, d1 = m.penalty.value_d1(resp)
    prior = float(m.alpha @ val.reshape(len(resp), -1).sum(axis=1))
    r = K.apply(u) - f
    e = prior + 0.5 * m.lam * float(np.sum(r * r))
    g = correlate_adjoint_bank(d1, m.kernels, m.alpha) + m.lam * K.adjoint(r)
    return e, g


def energy(m, u, f):
    u, f, K = _check_pair(m, u, f)
    resp = correlate_bank(u, m.kernels)
    val = m.penalty.value(resp)
    prior = float(m.alpha @ val.reshape(len(resp), -1).sum(axis=1))
    r = K.apply(u) - f
    return prior + 0.5 * m.lam * float(np.sum(r * r))


def grad_u(m, u, f):
    return energy_and_grad(m, u, f)[1]


def hess_vec(m, u, v):
    """``(sum_i alpha_i A_i^T D_i A_i + I) v`` with ``D_i = diag(phi''(A_i u))``.

    Only defined for the training configuration (identity data term, lam = 1).
    """
    if not m.K.is_identity or m.lam != 1.0:
        raise UnsupportedConfiguration("hess_vec requires K = Identity and lambda = 1")
    u = as_image(u, "u")
    v = as_image(v, "v")
    if u.shape != v.shape:
        raise DimensionError("u and v must have the same shape")
    d2 = m.penalty.d2(correlate_bank(u, m.kernels))
    return _hess_apply(m, d2, v)


def _hess_apply(m, d2, v):
    av = correlate_bank(v, m.kernels)
    return correlate_adjoint_bank(d2 * av, m.kernels, m.alpha) + v


@dataclass
class LowerDiagnostics:
    converged: bool
    iterations: int
    gnorm: float
    energy_trace: list
    status: str
    nfev: int

    def as_dict(self):
        return {"converged": self.converged, "iterations": self.iterations,
                "gnorm": self.gnorm, "status": self.status, "nfev": self.nfev,
                "energy_initial": self.energy_trace[0], "energy_final": self.energy_trace[-1]}


def solve_lower(m, f, init=None, gtol=1e-3, maxiter=2000, memory=8, strict=False):
    """Minimize the energy over ``u`` by L-BFGS until ``||grad||_2 <= gtol``.

    ``init`` defaults to the data operator's warm start (``f`` for denoising).
    If ``maxiter`` is exhausted the last (lowest-energy) iterate is returned
    with ``converged=False``; with ``strict=True`` a ``NotConvergedError`` is
    raised instead.
    """
    if not gtol > 0:
        raise ParameterError("gtol must be positive")
    f = as_image(f, "f")
    K = m.K
    if init is None:
        init = K.warm_start(f)
    u0 = as_image(init, "init")
    shape = u0.shape

    def obj(x):
        e, g = energy_and_grad(m, x.reshape(shape), f)
        return e, g.ravel()

    res = lbfgs(obj, u0.ravel(), LbfgsOptions(memory=memory, gtol=gtol, maxiter=maxiter))
    diag = LowerDiagnostics(converged=res.status == "gtol", iterations=res.nit,
                            gnorm=res.gnorm, energy_trace=res.trace, status=res.status,
                            nfev=res.nfev)
    u = res.x.reshape(shape)
    if not diag.converged:
        msg = (f"lower-level solve stopped ({res.status}) at ||grad|| = {res.gnorm:.3e} "
               f"> {gtol:.1e} after {res.nit} iterations")
        if strict:
            raise NotConvergedError(msg, diag)
        log.warning(msg)
    return u, diag
