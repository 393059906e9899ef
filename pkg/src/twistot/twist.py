"""The 2x2 SPD matrix behind the twisted quadratic cost |z|_A^2 = a x^2 + 2 b x v + c v^2."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameter, NotSPD


class Vec2(NamedTuple):
    x: float
    v: float


@dataclass(frozen=True)
class TwistMatrix:
    """Symmetric positive definite matrix ``[[a, b], [b, c]]``.

    Validation is strict (no epsilon slack): ``a > 0`` and ``a*c - b*b > 0``.
    """

    a: float
    b: float
    c: float

    def __post_init__(self):
        vals = (self.a, self.b, self.c)
        if not all(math.isfinite(t) for t in vals):
            raise NotSPD(f"non-finite entries {vals}")
        if self.a <= 0 or self.a * self.c - self.b * self.b <= 0:
            raise NotSPD(
                f"(a, b, c) = {vals} is not positive definite "
                f"(det = {self.a * self.c - self.b * self.b:g})"
            )

    @property
    def det(self) -> float:
        return self.a * self.c - self.b * self.b

    @property
    def trace(self) -> float:
        return self.a + self.c

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]])

    @classmethod
    def from_matrix(cls, m) -> "TwistMatrix":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), 0.5 * float(m[0, 1] + m[1, 0]), float(m[1, 1]))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c}


IDENTITY = TwistMatrix(1.0, 0.0, 1.0)


def make_twist(a: float, b: float, c: float) -> TwistMatrix:
    return TwistMatrix(float(a), float(b), float(c))


def theorem_matrix(alpha: float, c_scale: float) -> TwistMatrix:
    """``c_scale * [[alpha + 1/2, 1/2], [1/2, 1]]``, the matrix of the contraction theorem.

    Writing ``b = c_scale / 2`` this is ``[[b + c*alpha, b], [b, c]]`` with ``c = 2b``.
    """
    if not (alpha > 0 and c_scale > 0):
        raise InvalidParameter(f"alpha and c_scale must be positive, got {alpha}, {c_scale}")
    b = 0.5 * c_scale
    return TwistMatrix(b + c_scale * alpha, b, c_scale)


def eigenvalues(A: TwistMatrix) -> tuple[float, float]:
    """Closed-form eigenvalues ``(nu1, nu2)`` with ``nu1 <= nu2``.

    The smaller root is recovered as ``det / nu2`` to avoid cancellation; this is
    algebraically the same ``(a + c - sqrt((c - a)^2 + 4 b^2)) / 2``.
    """
    disc = math.hypot(A.c - A.a, 2.0 * A.b)
    nu2 = 0.5 * (A.a + A.c + disc)
    nu1 = A.det / nu2
    return nu1, nu2


def spectral_radius(A: TwistMatrix) -> float:
    return eigenvalues(A)[1]


def norm_sq(A: TwistMatrix, z) -> np.ndarray | float:
    """``|z|_A^2`` for a single point ``(x, v)`` or an ``(..., 2)`` array of points."""
    z = np.asarray(z, dtype=float)
    x, v = z[..., 0], z[..., 1]
    out = A.a * x * x + 2.0 * A.b * x * v + A.c * v * v
    return float(out) if out.ndim == 0 else out


def inner(A: TwistMatrix, z1, z2) -> np.ndarray | float:
    """Bilinear form ``<z1, z2>_A = z1 . A z2``."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    out = (
        A.a * z1[..., 0] * z2[..., 0]
        + A.b * (z1[..., 0] * z2[..., 1] + z1[..., 1] * z2[..., 0])
        + A.c * z1[..., 1] * z2[..., 1]
    )
    return float(out) if out.ndim == 0 else out


def apply(A: TwistMatrix, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.stack([A.a * z[..., 0] + A.b * z[..., 1], A.b * z[..., 0] + A.c * z[..., 1]], axis=-1)


def inverse(A: TwistMatrix) -> TwistMatrix:
    d = A.det
    return TwistMatrix(A.c / d, -A.b / d, A.a / d)


def sqrt_spd(A: TwistMatrix) -> TwistMatrix:
    """Principal square root of a 2x2 SPD matrix.

    Uses the Cayley-Hamilton identity ``sqrt(A) = (A + sqrt(det) I) / sqrt(tr + 2 sqrt(det))``.
    """
    s = math.sqrt(A.det)
    t = math.sqrt(A.a + A.c + 2.0 * s)
    return TwistMatrix((A.a + s) / t, A.b / t, (A.c + s) / t)


def equivalence_ratio(A: TwistMatrix) -> float:
    """``sqrt(nu2 / nu1)``: the constant in ``W_2(f_t, f_inf) <= C e^{-kt} W_2(f_0, f_inf)``."""
    nu1, nu2 = eigenvalues(A)
    return math.sqrt(nu2 / nu1)


def sym_sqrt(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD 2x2 array (same identity as :func:`sqrt_spd`)."""
    m = 0.5 * (np.asarray(m, dtype=float) + np.asarray(m, dtype=float).T)
    d = max(np.linalg.det(m), 0.0)
    s = math.sqrt(d)
    t = math.sqrt(np.trace(m) + 2.0 * s)
    return (m + s * np.eye(2)) / t
