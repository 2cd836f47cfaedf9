"""Smooth sparsity penalties with closed-form first and second derivatives.

=================  ==============================  ======================
kind               value                           notes
=================  ==============================  ======================
``abs``            sqrt(z^2 + eps^2)               smoothed |z|, convex
``logsq``          log(1 + z^2)                    Student-t, non-convex
``logabs``         log(1 - eps + sqrt(z^2+eps^2))  smoothed log(1 + |z|)
=================  ==============================  ======================
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = ["Penalty", "KINDS", "DEFAULT_EPSILON"]

KINDS = ("abs", "logsq", "logabs")
DEFAULT_EPSILON = 1e-2

_ALIASES = {
    "smoothedabs": "abs", "l1": "abs", "abs": "abs",
    "logsquare": "logsq", "logsq": "logsq", "studentt": "logsq",
    "logsmoothedabs": "logabs", "logabs": "logabs",
}


@dataclass(frozen=True)
class Penalty:
    """Elementwise penalty ``phi`` applied to filter responses.

    ``epsilon`` only affects the two smoothed kinds; it is a fixed model
    parameter, never trained.
    """

    kind: str = "logsq"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower().replace("_", "").replace("-", ""))
        if kind is None:
            raise ParameterError(f"unknown penalty kind {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "kind", kind)
        eps = float(self.epsilon)
        if kind != "logsq" and not eps > 0:
            raise ParameterError("epsilon must be positive for smoothed penalties")
        if kind == "logabs" and eps >= 1:
            raise ParameterError("epsilon must be < 1 for the log-abs penalty")
        object.__setattr__(self, "epsilon", eps)

    def value(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logsq":
            return np.log1p(z * z)
        r = np.sqrt(z * z + self.epsilon ** 2)
        if self.kind == "abs":
            return r
        return np.log1p(r - self.epsilon)

    def d1(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logsq":
            return 2.0 * z / (1.0 + z * z)
        r = np.sqrt(z * z + self.epsilon ** 2)
        if self.kind == "abs":
            return z / r
        return z / (r * (1.0 - self.epsilon + r))

    def d2(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logsq":
            z2 = z * z
            return 2.0 * (1.0 - z2) / (1.0 + z2) ** 2
        e = self.epsilon
        z2 = z * z
        r2 = z2 + e * e
        r = np.sqrt(r2)
        if self.kind == "abs":
            return e * e / (r2 * r)
        s = 1.0 - e + r
        return (e * e * (1.0 - e) + (e * e - z2) * r) / (r2 * r * s * s)

    def value_d1(self, z):
        """``(value, d1)`` sharing intermediate work."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logsq":
            z2 = z * z
            return np.log1p(z2), 2.0 * z / (1.0 + z2)
        r = np.sqrt(z * z + self.epsilon ** 2)
        if self.kind == "abs":
            return r, z / r
        t = r - self.epsilon
        return np.log1p(t), z / (r * (1.0 + t))
