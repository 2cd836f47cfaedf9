"""Bi-level training of filter banks by implicit (adjoint) differentiation.

For each sample the lower problem ``u* = argmin_u E(u; theta, f)`` is solved
to high accuracy, then the loss gradient is obtained from a single
Hessian solve ``H p = u* - g``::

    dL/dalpha_i  = -<A_i^T phi'(A_i u*), p>
    dL/dbeta_ij  = -alpha_i <B_j^T phi'(A_i u*) + A_i^T D_i B_j u*, p>

with ``D_i = diag(phi''(A_i u*))``. Gradients of several samples add up.
"""

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .energy import EnergyModel, FilterBank, FoEModel, energy_and_grad, solve_lower
from .errors import DimensionError, NotConvergedError, ParameterError
from .imagecore import as_image, correlate_adjoint_bank, correlate_bank, dct_basis
from .penalty import Penalty
from .solvers import KrylovOptions, LbfgsOptions, lbfgs, solve_spd_like

__all__ = [
    "TrainingSample",
    "TrainConfig",
    "ParamGradient",
    "Parametrization",
    "BilevelObjective",
    "TrainResult",
    "loss",
    "param_grad",
    "init_filterbank",
    "train",
    "finite_difference_check",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        f = as_image(self.f, "f")
        g = as_image(self.g, "g")
        if f.shape != g.shape:
            raise DimensionError(f"noisy {f.shape} and clean {g.shape} differ in shape")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``mode`` is ``"free"`` (train alpha and all basis coefficients) or
    ``"fixed"`` (keep each filter's direction, train its scale and weight).
    ``warm_start`` selects the lower-level initial point: ``"previous"``
    starts from each sample's solution at the last accepted outer iterate,
    ``"noisy"`` always starts at ``f``.
    """

    kernel_size: int = 7
    n_filters: int = 48
    init: str = "dct"
    init_norm: float = 0.01
    init_weight: float = 1.0
    penalty: str = "logsq"
    epsilon: float = 1e-2
    mode: str = "free"
    lower_gtol: float = 1e-3
    lower_maxiter: int = 50000
    outer_ftol_rel: float = 1e-5
    outer_maxiter: int = 500
    outer_max_step_rel: float = 1.0
    lbfgs_memory: int = 8
    krylov_rtol: float = 1e-8
    warm_start: str = "previous"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in ("free", "fixed"):
            raise ParameterError(f"mode must be 'free' or 'fixed', got {self.mode!r}")
        if self.init not in ("dct", "random", "zero"):
            raise ParameterError(f"init must be 'dct', 'random' or 'zero', got {self.init!r}")
        if self.warm_start not in ("previous", "noisy"):
            raise ParameterError("warm_start must be 'previous' or 'noisy'")
        for name in ("lower_gtol", "outer_ftol_rel", "krylov_rtol", "outer_max_step_rel"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.jobs < 1:
            raise ParameterError("jobs must be >= 1")
        Penalty(self.penalty, self.epsilon)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def loss(u, g):
    """Half squared Euclidean distance to the ground truth."""
    u, g = as_image(u, "u"), as_image(g, "g")
    if u.shape != g.shape:
        raise DimensionError(f"shape mismatch {u.shape} vs {g.shape}")
    r = u - g
    return 0.5 * float(np.sum(r * r))


@dataclass
class ParamGradient:
    alpha: np.ndarray
    beta: np.ndarray
    krylov: object = None


def param_grad(m, sample, u_star, gtol=1e-3, krylov=None):
    """Adjoint gradient of ``loss(u*, g)`` with respect to alpha and beta.

    ``m`` must be the training energy (identity data term, lambda 1) and
    ``u_star`` its minimizer for ``sample.f`` to within ``gtol``.
    """
    if not m.K.is_identity or m.lam != 1.0:
        raise ParameterError("parameter gradients need the training energy (K = I, lambda = 1)")
    u = as_image(u_star, "u_star")
    if u.shape != sample.f.shape:
        raise DimensionError("u_star does not match the sample")
    A, alpha, pen = m.kernels, m.alpha, m.penalty
    n = len(A)
    resp = correlate_bank(u, A)
    d1 = pen.d1(resp)
    d2 = pen.d2(resp)
    gnorm = float(np.linalg.norm(correlate_adjoint_bank(d1, A, alpha) + u - sample.f))
    if gnorm > gtol:
        raise NotConvergedError(
            f"u_star is not a lower-level solution: ||grad E|| = {gnorm:.3e} > {gtol:.1e}")

    shape = u.shape

    def hvp(v):
        v = v.reshape(shape)
        return (correlate_adjoint_bank(d2 * correlate_bank(v, A), A, alpha) + v).ravel()

    p, kdiag = solve_spd_like(hvp, (u - sample.g).ravel(), krylov or KrylovOptions())
    p = p.reshape(shape)

    atoms = m.filters.basis.atoms
    nb = len(atoms)
    Ap = correlate_bank(p, A)
    Bu = correlate_bank(u, atoms).reshape(nb, -1)
    Bp = correlate_bank(p, atoms).reshape(nb, -1)
    g_alpha = -np.einsum("ip,ip->i", d1.reshape(n, -1), Ap.reshape(n, -1))
    g_beta = -alpha[:, None] * (d1.reshape(n, -1) @ Bp.T + (d2 * Ap).reshape(n, -1) @ Bu.T)
    return ParamGradient(alpha=g_alpha, beta=g_beta, krylov=kdiag)


class Parametrization:
    """Maps a flat parameter vector to a filter bank and back.

    free:  theta = (alpha, beta.ravel())
    fixed: theta = (alpha, scale), beta_i = scale_i * direction_i with unit directions
    """

    def __init__(self, basis, n, mode="free", directions=None):
        if mode not in ("free", "fixed"):
            raise ParameterError(f"unknown mode {mode!r}")
        self.basis, self.n, self.mode = basis, n, mode
        if mode == "fixed":
            if directions is None:
                raise ParameterError("fixed mode needs filter directions")
            d = np.asarray(directions, dtype=np.float64)
            norms = np.linalg.norm(d, axis=1)
            if d.shape != (n, basis.size) or np.any(norms == 0):
                raise ParameterError("directions must be n nonzero rows over the basis")
            self.directions = d / norms[:, None]

    @classmethod
    def for_filters(cls, filters, mode="free"):
        directions = filters.beta if mode == "fixed" else None
        return cls(filters.basis, filters.n, mode, directions)

    @property
    def size(self):
        return self.n + (self.n * self.basis.size if self.mode == "free" else self.n)

    def lower_bounds(self):
        lb = np.full(self.size, -np.inf)
        lb[:self.n] = 0.0
        return lb

    def encode(self, filters):
        if self.mode == "free":
            return np.concatenate([filters.alpha, filters.beta.ravel()])
        scale = filters.beta @ self.directions.T
        return np.concatenate([filters.alpha, np.diag(scale)])

    def decode(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        alpha = np.maximum(theta[:self.n], 0.0)
        if self.mode == "free":
            beta = theta[self.n:].reshape(self.n, self.basis.size)
        else:
            beta = theta[self.n:, None] * self.directions
        return FilterBank(self.basis, beta, alpha)

    def gradient(self, pg):
        if self.mode == "free":
            return np.concatenate([pg.alpha, pg.beta.ravel()])
        return np.concatenate([pg.alpha, np.einsum("ij,ij->i", pg.beta, self.directions)])


def init_filterbank(k, n, style="dct", norm=0.01, weight=1.0, seed=0):
    """Initial filters of side ``k``: scaled DCT atoms, random, or all zero.

    Every kernel gets Frobenius norm ``norm`` (zero for ``"zero"``) and
    every weight equals ``weight``.
    """
    basis = dct_basis(k)
    if n < 1:
        raise ParameterError("need at least one filter")
    if style == "dct":
        if n > basis.size:
            raise ParameterError(f"dct init supports at most {basis.size} filters for k={k}")
        beta = norm * np.eye(basis.size)[:n]
    elif style == "random":
        rng = np.random.default_rng(seed)
        beta = rng.standard_normal((n, basis.size))
        beta *= norm / np.linalg.norm(beta, axis=1, keepdims=True)
    elif style == "zero":
        beta = np.zeros((n, basis.size))
    else:
        raise ParameterError(f"unknown init style {style!r}")
    return FilterBank(basis, beta, np.full(n, float(weight)))


@dataclass
class _SampleEval:
    loss: float
    grad: np.ndarray
    u: np.ndarray
    iterations: int
    krylov_iterations: int
    shifted: bool


class BilevelObjective:
    """Total loss over samples and its gradient as a function of theta.

    Every call solves all lower problems to ``lower_gtol``; a solve that
    fails to converge raises ``NotConvergedError``. The best parameter
    vector seen so far is kept in ``best_theta``.

    With ``warm_start="previous"`` every evaluation starts from the
    solutions at the anchor point, which ``accept`` moves to an evaluated
    theta. Keeping the start fixed between acceptances makes the loss a
    function of theta alone along a line search; chaining trial points
    instead lets the non-convex lower problem land in different local
    minima and the line search sees noise.
    """

    _KEEP = 64

    def __init__(self, samples, penalty, param, lower_gtol=1e-3, lower_maxiter=50000,
                 krylov_rtol=1e-8, warm_start="previous", jobs=1):
        if not samples:
            raise ParameterError("need at least one training sample")
        self.samples = list(samples)
        self.penalty = penalty
        self.param = param
        self.lower_gtol = lower_gtol
        self.lower_maxiter = lower_maxiter
        self.krylov = KrylovOptions(rtol=krylov_rtol)
        self.warm_start = warm_start
        self.jobs = jobs
        self._u = [s.f for s in self.samples]
        self._recent = {}
        self.nfev = 0
        self.lower_iterations = 0
        self.krylov_iterations = 0
        self.best_loss = np.inf
        self.best_theta = None
        self.last = None

    def _one(self, idx, m):
        s = self.samples[idx]
        init = self._u[idx] if self.warm_start == "previous" else s.f
        u, diag = solve_lower(m, s.f, init=init, gtol=self.lower_gtol,
                              maxiter=self.lower_maxiter)
        if not diag.converged:
            raise NotConvergedError(
                f"sample {idx}: lower-level solve did not reach ||grad|| <= {self.lower_gtol:g} "
                f"({diag.status}, ||grad|| = {diag.gnorm:.3e})", diag)
        pg = param_grad(m, s, u, gtol=self.lower_gtol, krylov=self.krylov)
        return _SampleEval(loss(u, s.g), self.param.gradient(pg), u, diag.iterations,
                           pg.krylov.iterations, pg.krylov.shifted)

    def evaluate(self, theta):
        m = EnergyModel(self.param.decode(theta), self.penalty)
        idx = range(len(self.samples))
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as ex:
                results = list(ex.map(lambda i: self._one(i, m), idx))
        else:
            results = [self._one(i, m) for i in idx]
        total = 0.0
        grad = np.zeros(self.param.size)
        for r in results:
            total += r.loss
            grad += r.grad
            self.lower_iterations += r.iterations
            self.krylov_iterations += r.krylov_iterations
        self.nfev += 1
        self.last = results
        if len(self._recent) >= self._KEEP:
            self._recent.pop(next(iter(self._recent)))
        self._recent[np.asarray(theta, dtype=np.float64).tobytes()] = [r.u for r in results]
        if total < self.best_loss:
            self.best_loss = total
            self.best_theta = np.array(theta, copy=True)
        return total, grad

    __call__ = evaluate

    def accept(self, theta):
        """Make the lower solutions at an evaluated ``theta`` the new warm starts."""
        u = self._recent.get(np.asarray(theta, dtype=np.float64).tobytes())
        if u is None:
            # not evaluated exactly here; fall back to the latest solutions
            u = [r.u for r in self.last]
        self._u = list(u)
        self._recent.clear()


@dataclass
class TrainResult:
    model: FoEModel
    initial_loss: float
    final_loss: float
    status: str
    iterations: int
    evaluations: int
    log: list = field(default_factory=list)

    @property
    def filters(self):
        return self.model.filters


def _record(it, theta, f, g, obj, t0):
    fb = obj.param.decode(theta)
    norms = fb.norms()
    return {
        "iteration": it,
        "loss": f,
        "grad_norm": float(np.linalg.norm(g)),
        "alpha_min": float(fb.alpha.min()),
        "alpha_mean": float(fb.alpha.mean()),
        "alpha_max": float(fb.alpha.max()),
        "beta_norm": float(np.linalg.norm(fb.beta)),
        "filter_norm_mean": float(norms.mean()),
        "filter_norm_max": float(norms.max()),
        "evaluations": obj.nfev,
        "lower_iterations": obj.lower_iterations,
        "krylov_iterations": obj.krylov_iterations,
        "wall_time": time.perf_counter() - t0,
    }


def train(samples, cfg=None, init=None, on_record=None):
    """Learn a filter bank on ``samples`` by bounded L-BFGS over the bi-level loss.

    ``init`` overrides the configured initial filter bank (e.g. to resume).
    ``on_record`` receives one dict per accepted outer iteration (plus the
    initial point as iteration 0). Raises ``NotConvergedError`` if any
    lower-level solve fails.
    """
    cfg = cfg or TrainConfig()
    penalty = Penalty(cfg.penalty, cfg.epsilon)
    if init is None:
        init = init_filterbank(cfg.kernel_size, cfg.n_filters, cfg.init,
                               cfg.init_norm, cfg.init_weight, cfg.seed)
    param = Parametrization.for_filters(init, cfg.mode)
    obj = BilevelObjective(samples, penalty, param, cfg.lower_gtol, cfg.lower_maxiter,
                           cfg.krylov_rtol, cfg.warm_start, cfg.jobs)
    theta0 = param.encode(init)
    records = []
    t0 = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    f0, g0 = obj(theta0)
    obj.accept(theta0)
    emit(_record(0, theta0, f0, g0, obj, t0))
    cache = {"x": theta0, "f": f0, "g": g0}

    def fun(theta):
        if np.array_equal(theta, cache["x"]):
            return cache["f"], cache["g"]
        f, g = obj(theta)
        return f, g

    def callback(it, x, f, g):
        obj.accept(x)
        emit(_record(it, x, f, g, obj, t0))

    opts = LbfgsOptions(memory=cfg.lbfgs_memory, gtol=0.0, ftol_rel=cfg.outer_ftol_rel,
                        maxiter=cfg.outer_maxiter, bounds=param.lower_bounds(),
                        max_step_rel=cfg.outer_max_step_rel, callback=callback)
    res = lbfgs(fun, theta0, opts)
    best = obj.best_theta if obj.best_theta is not None else res.x
    filters = param.decode(best)
    model = FoEModel(filters, penalty, provenance={
        "seed": cfg.seed, "config_hash": cfg.digest(), "mode": cfg.mode,
        "status": res.status, "iterations": res.nit, "final_loss": obj.best_loss,
    })
    log.info("training stopped (%s) after %d iterations, loss %.6g -> %.6g",
             res.status, res.nit, f0, obj.best_loss)
    return TrainResult(model=model, initial_loss=f0, final_loss=obj.best_loss,
                       status=res.status, iterations=res.nit, evaluations=obj.nfev,
                       log=records)


def finite_difference_check(samples, filters, penalty, mode="free", h=3e-5, coords=None,
                            gtol=1e-8, analytic_gtol=None, maxiter=20000, stencil=4):
    """Compare adjoint gradients with central differences of the re-solved loss.

    Each perturbed lower problem is solved from the unperturbed solution to
    ``gtol``. ``stencil=4`` uses the fourth-order central formula
    ``(8 (L(+h) - L(-h)) - (L(+2h) - L(-2h))) / 12h``, which keeps truncation
    error small at steps large enough to swamp the solver noise in ``L``;
    ``stencil=2`` is the plain ``(L(+h) - L(-h)) / 2h``. ``h=None`` picks
    ``1e-4 * max(|theta_k|, 1e-2)`` per coordinate.

    Returns ``(analytic, numeric, relative_error)`` over ``coords``; the
    relative error is taken against ``max(|analytic|, |numeric|)`` floored
    at ``1e-6`` of the largest gradient entry.
    """
    if stencil not in (2, 4):
        raise ParameterError("stencil must be 2 or 4")
    param = Parametrization.for_filters(filters, mode)
    theta = param.encode(filters)
    obj = BilevelObjective(samples, penalty, param, lower_gtol=analytic_gtol or gtol,
                           lower_maxiter=maxiter, warm_start="noisy")
    _, grad = obj(theta)
    base_u = [r.u for r in obj.last]
    coords = range(param.size) if coords is None else list(coords)

    def total_loss(th):
        m = EnergyModel(param.decode(th), penalty)
        tot = 0.0
        for s, u0 in zip(samples, base_u):
            u, diag = solve_lower(m, s.f, init=u0, gtol=gtol, maxiter=maxiter)
            if not diag.converged:
                raise NotConvergedError(f"oracle solve stopped at ||grad|| = {diag.gnorm:.3e}")
            tot += loss(u, s.g)
        return tot

    analytic, numeric = [], []
    for k in coords:
        step = h if h is not None else 1e-4 * max(abs(theta[k]), 1e-2)

        def at(c):
            th = theta.copy()
            th[k] += c * step
            return total_loss(th)

        if stencil == 2:
            numeric.append((at(1) - at(-1)) / (2 * step))
        else:
            numeric.append((8 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12 * step))
        analytic.append(grad[k])
    analytic, numeric = np.array(analytic), np.array(numeric)
    floor = 1e-6 * max(np.max(np.abs(grad)), 1e-300)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return analytic, numeric, rel
