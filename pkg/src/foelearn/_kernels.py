"""Hot loops: filter-bank correlation with symmetric boundaries and its adjoint.

Two interchangeable implementations live here. The numba path compiles
explicit loops; the numpy path uses sliding windows and ``np.add.at``. The
active one is chosen at import time: set ``FOELEARN_DISABLE_NUMBA=1`` to force
the numpy path (numba missing also falls back).

Boundary rule is half-sample symmetric extension (``d c b a | a b c d``),
i.e. numpy's ``mode="symmetric"``. The adjoint folds every padded
contribution back onto the source pixel it was copied from.
"""

import os
from functools import lru_cache

import numpy as np

__all__ = [
    "BACKEND",
    "pad_index",
    "correlate_bank",
    "correlate_adjoint_bank",
    "correlate_bank_numpy",
    "correlate_adjoint_bank_numpy",
]


@lru_cache(maxsize=256)
def pad_index(n, r):
    """Source index for each of the ``n + 2r`` padded positions (read-only)."""
    if r > n:
        raise ValueError(f"pad width {r} exceeds dimension {n}")
    i = np.arange(-r, n + r)
    i = np.where(i < 0, -i - 1, i)
    i = np.where(i >= n, 2 * n - i - 1, i).astype(np.int64)
    i.flags.writeable = False
    return i


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def correlate_bank_numpy(u, kernels):
    n, k, _ = kernels.shape
    r = k // 2
    up = np.pad(u, r, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(up, (k, k))
    return np.tensordot(kernels, win, axes=([1, 2], [2, 3]))


def correlate_adjoint_bank_numpy(v, kernels, weights):
    n, k, _ = kernels.shape
    H, W = v.shape[1:]
    r = k // 2
    wk = kernels * weights[:, None, None]
    acc = np.zeros((H + 2 * r, W + 2 * r))
    for dy in range(k):
        for dx in range(k):
            acc[dy:dy + H, dx:dx + W] += np.tensordot(wk[:, dy, dx], v, axes=1)
    rows = pad_index(H, r)
    cols = pad_index(W, r)
    tmp = np.zeros((H, W + 2 * r))
    np.add.at(tmp, rows, acc)
    out = np.zeros((H, W))
    np.add.at(out, (slice(None), cols), tmp)
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    # Innermost loops run contiguously in x so they vectorize. The forward
    # pass keeps one output row in cache across all taps. No fastmath, so
    # the summation order is fixed.
    @njit(cache=True, nogil=True)
    def _pad(u, rows, cols, up):
        for q in range(up.shape[0]):
            sy = rows[q]
            for s in range(up.shape[1]):
                up[q, s] = u[sy, cols[s]]

    @njit(cache=True, nogil=True)
    def _corr(up, kernels, out):
        n, k, _ = kernels.shape
        H, W = out.shape[1], out.shape[2]
        out[:] = 0.0
        for f in range(n):
            for y in range(H):
                for dy in range(k):
                    for dx in range(k):
                        c = kernels[f, dy, dx]
                        for x in range(W):
                            out[f, y, x] += c * up[y + dy, x + dx]

    @njit(cache=True, nogil=True)
    def _corr_adj(v, kernels, weights, rows, cols, out):
        n, k, _ = kernels.shape
        H, W = v.shape[1], v.shape[2]
        acc = np.zeros((H + k - 1, W + k - 1))
        for f in range(n):
            w = weights[f]
            if w == 0.0:
                continue
            for dy in range(k):
                for dx in range(k):
                    c = w * kernels[f, dy, dx]
                    for y in range(H):
                        for x in range(W):
                            acc[y + dy, x + dx] += c * v[f, y, x]
        for q in range(acc.shape[0]):
            sy = rows[q]
            for s in range(acc.shape[1]):
                out[sy, cols[s]] += acc[q, s]

    def correlate_bank(u, kernels):
        n, k, _ = kernels.shape
        H, W = u.shape
        r = k // 2
        up = np.empty((H + 2 * r, W + 2 * r))
        _pad(np.ascontiguousarray(u, dtype=np.float64), pad_index(H, r), pad_index(W, r), up)
        out = np.empty((n, H, W))
        _corr(up, np.ascontiguousarray(kernels), out)
        return out

    def correlate_adjoint_bank(v, kernels, weights):
        n, k, _ = kernels.shape
        H, W = v.shape[1:]
        r = k // 2
        out = np.zeros((H, W))
        _corr_adj(np.ascontiguousarray(v), np.ascontiguousarray(kernels),
                  np.ascontiguousarray(weights, dtype=np.float64),
                  pad_index(H, r), pad_index(W, r), out)
        return out

    return correlate_bank, correlate_adjoint_bank


def _select_backend():
    if os.environ.get("FOELEARN_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return "numpy", None
    try:
        return "numba", _build_numba()
    except ImportError:
        return "numpy", None


BACKEND, _numba_funcs = _select_backend()

if _numba_funcs is None:
    correlate_bank = correlate_bank_numpy
    correlate_adjoint_bank = correlate_adjoint_bank_numpy
else:
    correlate_bank, correlate_adjoint_bank = _numba_funcs
