"""Matrix-free solvers: bounded L-BFGS and MINRES for symmetric systems."""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NotConvergedError, ParameterError

__all__ = [
    "LbfgsOptions",
    "LbfgsResult",
    "lbfgs",
    "KrylovOptions",
    "KrylovResult",
    "solve_spd_like",
    "minres",
]

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


@dataclass
class LbfgsOptions:
    memory: int = 8
    gtol: float = 1e-5
    ftol_rel: float = 0.0
    maxiter: int = 1000
    c1: float = 1e-4
    c2: float = 0.9
    bounds: np.ndarray | None = None
    max_linesearch: int = 30
    max_step_rel: float | None = None
    callback: object = None

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ParameterError("line search constants need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ParameterError("memory must be >= 1")
        if self.maxiter < 0:
            raise ParameterError("maxiter must be >= 0")
        if self.max_step_rel is not None and not self.max_step_rel > 0:
            raise ParameterError("max_step_rel must be positive")


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    converged: bool
    status: str
    nit: int
    nfev: int
    gnorm: float
    trace: list = field(default_factory=list)

    @property
    def line_search_failed(self):
        return self.status == "linesearch"


class _Fun:
    """Objective wrapper counting evaluations and rejecting non-finite values."""

    def __init__(self, fun):
        self.fun = fun
        self.nfev = 0

    def __call__(self, x):
        self.nfev += 1
        f, g = self.fun(x)
        return float(f), np.asarray(g, dtype=np.float64)


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return q


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic through (a, fa, da), (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (db + d2 - d1) / denom
    return t if np.isfinite(t) else None


def _line_search(phi, f0, dphi0, t0, tmax, c1, c2, maxls):
    """Strong-Wolfe search on [0, tmax] (Nocedal & Wright, alg. 3.5/3.6).

    ``phi(t)`` returns ``(f, g, dphi)``. Once ``f`` equals ``f0`` to within
    floating-point resolution the decrease can no longer be measured; the
    search then brackets on the sign of ``dphi`` alone and accepts a step
    meeting the curvature condition (approximate Wolfe, Hager & Zhang).
    If the evaluation budget runs out, the lowest trial point that met the
    sufficient-decrease condition is returned (curvature may then fail; the
    caller skips non-positive curvature pairs). Returns ``(t, f, g)`` or
    ``None`` if no trial point decreased ``f`` sufficiently.
    """
    ftol_abs = 64 * _EPS * max(1.0, abs(f0))
    evals = 0
    best = None

    def armijo(t, f):
        nonlocal best
        ok = f <= f0 + c1 * t * dphi0
        if ok and f < f0 and (best is None or f < best[1]):
            best = (t, f, g_last)
        return ok

    def curvature(d):
        return abs(d) <= -c2 * dphi0

    def unresolved(f):
        return abs(f - f0) <= ftol_abs

    def flat(f, d):
        return unresolved(f) and curvature(d)

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        nonlocal evals, g_last
        while evals < maxls:
            width = hi - lo
            t = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            if t is None or not (min(lo, hi) + 0.1 * abs(width) <= t <= max(lo, hi) - 0.1 * abs(width)):
                t = lo + 0.5 * width
            if abs(width) <= _EPS * max(1.0, abs(lo)):
                return best
            f, g, d = phi(t)
            g_last = g
            evals += 1
            if not np.isfinite(f):
                hi, f_hi, d_hi = t, np.inf, 0.0
                continue
            if flat(f, d):
                return t, f, g
            if unresolved(f) and unresolved(f_lo):
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = t, f, d
                else:
                    lo, f_lo, d_lo = t, f, d
            elif not armijo(t, f) or f >= f_lo:
                hi, f_hi, d_hi = t, f, d
            else:
                if curvature(d):
                    return t, f, g
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = t, f, d
        return best

    g_last = None
    t_prev, f_prev, d_prev = 0.0, f0, dphi0
    t = min(t0, tmax)
    while evals < maxls:
        f, g, d = phi(t)
        g_last = g
        evals += 1
        if not np.isfinite(f):
            t = t_prev + 0.5 * (t - t_prev)
            continue
        if flat(f, d):
            return t, f, g
        if unresolved(f):
            if d >= 0:
                return zoom(t_prev, f_prev, d_prev, t, f, d)
        elif not armijo(t, f) or (t_prev > 0 and f >= f_prev):
            return zoom(t_prev, f_prev, d_prev, t, f, d)
        if curvature(d):
            return t, f, g
        if d >= 0:
            return zoom(t, f, d, t_prev, f_prev, d_prev)
        if t >= tmax:
            # blocked by a bound: sufficient decrease holds, take the boundary point
            return t, f, g
        t_prev, f_prev, d_prev = t, f, d
        t = min(4.0 * t, tmax)
    return best


def lbfgs(fun, x0, opts=None):
    """Minimize ``fun`` (returning value and gradient) by limited-memory BFGS.

    Optional lower ``bounds`` are kept feasible: the search direction is
    zeroed on active coordinates, the step is limited to the feasible
    segment and iterates are projected after each step. With
    ``max_step_rel`` no step is longer than ``max_step_rel * max(1, ||x||)``.
    Convergence is declared on the 2-norm of the projected gradient.
    """
    opts = opts or LbfgsOptions()
    fun = _Fun(fun)
    x = np.array(x0, dtype=np.float64, copy=True)
    lb = None if opts.bounds is None else np.broadcast_to(
        np.asarray(opts.bounds, dtype=np.float64), x.shape)
    if lb is not None:
        x = np.maximum(x, lb)
    f, g = fun(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise FloatingPointError("objective or gradient is not finite at the initial point")

    S, Y, rho = deque(maxlen=opts.memory), deque(maxlen=opts.memory), deque(maxlen=opts.memory)
    trace = [f]
    status = "maxiter"
    nit = 0

    def active_set(x, g):
        if lb is None:
            return None
        return (x <= lb) & (g > 0)

    def projected(g, act):
        return g if act is None else np.where(act, 0.0, g)

    while True:
        act = active_set(x, g)
        pg = projected(g, act)
        gnorm = float(np.linalg.norm(pg))
        if gnorm <= opts.gtol:
            status = "gtol"
            break
        if nit >= opts.maxiter:
            status = "maxiter"
            break

        res = None
        for restart in (False, True):
            if restart:
                if not S:
                    break
                # poor quasi-Newton direction: drop the memory and retry steepest descent
                S.clear(); Y.clear(); rho.clear()
            d = -_two_loop(pg, S, Y, rho)
            if lb is not None:
                d[act | ((x <= lb) & (d < 0))] = 0.0
            dphi0 = float(g @ d)
            if S and not dphi0 < -1e-8 * gnorm * float(np.linalg.norm(d)):
                continue
            if not dphi0 < 0:
                break
            tmax = np.inf
            if lb is not None:
                neg = d < 0
                if np.any(neg):
                    tmax = float(np.min((x[neg] - lb[neg]) / -d[neg]))
            if opts.max_step_rel is not None:
                # trust-region style cap: ||t d|| <= max_step_rel * max(1, ||x||)
                cap = opts.max_step_rel * max(1.0, float(np.linalg.norm(x)))
                tmax = min(tmax, cap / float(np.linalg.norm(d)))
            t0 = 1.0

            def phi(t, d=d):
                xt = x + t * d
                if lb is not None:
                    xt = np.maximum(xt, lb)
                ft, gt = fun(xt)
                return ft, gt, float(gt @ d)

            res = _line_search(phi, f, dphi0, t0, tmax, opts.c1, opts.c2, opts.max_linesearch)
            if res is not None:
                break
        if res is None:
            status = "linesearch"
            break
        t, f_new, g_new = res
        x_new = x + t * d
        if lb is not None:
            x_new = np.maximum(x_new, lb)
            if t >= tmax:
                blocking = (d < 0) & ((x - lb) / np.where(d < 0, -d, 1.0) <= tmax * (1 + 1e-12))
                x_new[blocking] = lb[blocking]
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > _EPS * float(np.linalg.norm(s)) * float(np.linalg.norm(y)) and sy > 0:
            S.append(s); Y.append(y); rho.append(1.0 / sy)
        f_old = f
        x, f, g = x_new, f_new, g_new
        nit += 1
        trace.append(f)
        if opts.callback is not None:
            opts.callback(nit, x, f, g)
        if opts.ftol_rel > 0 and (f_old - f) / max(1.0, abs(f_old)) <= opts.ftol_rel:
            status = "ftol"
            break

    act = active_set(x, g)
    gnorm = float(np.linalg.norm(projected(g, act)))
    return LbfgsResult(x=x, f=f, grad=g, converged=status in ("gtol", "ftol"),
                       status=status, nit=nit, nfev=fun.nfev, gnorm=gnorm, trace=trace)


@dataclass
class KrylovOptions:
    rtol: float = 1e-8
    maxiter: int | None = None
    shift: float = 0.0
    fallback_shift: float = 1e-6
    check_symmetry: bool = False
    refinements: int = 3

    def __post_init__(self):
        if not self.rtol > 0:
            raise ParameterError("rtol must be positive")
        if self.refinements < 0:
            raise ParameterError("refinements must be non-negative")


@dataclass
class KrylovResult:
    converged: bool
    iterations: int
    residual: float
    bnorm: float
    shift: float
    shifted: bool


def _symmetry_gap(hvp, n):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(2):
        v, w = rng.standard_normal(n), rng.standard_normal(n)
        a, b = float(hvp(v) @ w), float(v @ hvp(w))
        worst = max(worst, abs(a - b) / max(abs(a), abs(b), 1e-300))
    return worst


def minres(matvec, b, rtol, maxiter):
    """Unpreconditioned MINRES (Paige & Saunders) from a zero initial guess.

    Stops when the recurrence residual ``|eta| <= rtol * ||b||``. Returns
    ``(x, iterations)``.
    """
    n = b.size
    x = np.zeros(n)
    beta1 = float(np.linalg.norm(b))
    if beta1 == 0.0:
        return x, 0
    v_prev = np.zeros(n)
    v = b / beta1
    beta = beta1
    eta = beta1
    c_prev = c = 1.0
    s_prev = s = 0.0
    w_prev2 = np.zeros(n)
    w_prev = np.zeros(n)
    it = 0
    while it < maxiter:
        it += 1
        av = matvec(v)
        alpha = float(v @ av)
        v_next = av - alpha * v - beta * v_prev
        beta_next = float(np.linalg.norm(v_next))
        delta = c * alpha - c_prev * s * beta
        rho1 = np.hypot(delta, beta_next)
        rho2 = s * alpha + c_prev * c * beta
        rho3 = s_prev * beta
        if rho1 == 0.0:
            break
        c_prev, s_prev = c, s
        c, s = delta / rho1, beta_next / rho1
        w = (v - rho3 * w_prev2 - rho2 * w_prev) / rho1
        x += c * eta * w
        eta = -s * eta
        if abs(eta) <= rtol * beta1 or beta_next == 0.0:
            break
        v_prev, v, beta = v, v_next / beta_next, beta_next
        w_prev2, w_prev = w_prev, w
    return x, it


def solve_spd_like(hvp, b, opts=None):
    """Solve ``H p = b`` for symmetric (possibly indefinite) ``H`` given as ``hvp``.

    Runs MINRES, then checks the true residual ``||H p - b|| <= rtol ||b||``
    and, if needed, restarts on that residual up to ``opts.refinements`` times.
    On failure a single retry with ``H + shift I`` is made and reported in the
    diagnostics. Raises ``NotConvergedError`` if that fails too.
    """
    opts = opts or KrylovOptions()
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), KrylovResult(True, 0, 0.0, 0.0, opts.shift, False)
    if opts.check_symmetry:
        gap = _symmetry_gap(hvp, n)
        if gap > 1e-8:
            raise ParameterError(f"operator is not symmetric (relative gap {gap:.2e})")
    maxiter = opts.maxiter if opts.maxiter is not None else 10 * n

    def attempt(shift):
        def mv(v):
            out = hvp(v)
            return out + shift * v if shift else out

        # the recurrence residual drifts from the true one on ill-conditioned
        # systems, so restart on the true residual a few times
        p, it = minres(mv, b, 0.5 * opts.rtol, maxiter)
        res = b - mv(p)
        r = float(np.linalg.norm(res))
        for _ in range(opts.refinements):
            if r <= opts.rtol * bnorm or it >= maxiter:
                break
            dp, k = minres(mv, res, 0.5 * opts.rtol * bnorm / r, maxiter - it)
            it += k
            cand = p + dp
            res_c = b - mv(cand)
            r_c = float(np.linalg.norm(res_c))
            if r_c >= r:
                break
            p, res, r = cand, res_c, r_c
        return p, r, it

    p, r, it = attempt(opts.shift)
    if r <= opts.rtol * bnorm:
        return p, KrylovResult(True, it, r, bnorm, opts.shift, False)
    shift = opts.shift + opts.fallback_shift
    log.warning("MINRES stagnated (residual %.3e); retrying with shift %.1e", r / bnorm, shift)
    p, r, it2 = attempt(shift)
    diag = KrylovResult(r <= opts.rtol * bnorm, it + it2, r, bnorm, shift, True)
    if not diag.converged:
        raise NotConvergedError(
            f"Krylov solve failed: relative residual {r / bnorm:.3e} > {opts.rtol:.1e}", diag)
    return p, diag
