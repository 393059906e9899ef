"""Confinement potential ``U(x) = alpha x^2 / 2 + psi(x)``, admissibility and rate constants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import HypothesisViolated, InvalidParameter, NoConvergence, NotFound
from .twist import TwistMatrix, inner

log = logging.getLogger(__name__)

PSI_DD_CEILING = 0.1
MAX_DOUBLINGS = 20


class Perturbation:
    """Compactly supported C^2 perturbation on ``[-R, R]``; values vanish outside."""

    R: float

    def value(self, x):
        raise NotImplementedError

    def d1(self, x):
        raise NotImplementedError

    def d2(self, x):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Novoid(Perturbation):
    """``scale * (x - 1)^4 (x + 1)^4`` on ``[-1, 1]``, zero outside."""

    scale: float = 1.0
    R: float = field(default=1.0, init=False)

    def _inside(self, x):
        x = np.asarray(x, dtype=float)
        return x, np.abs(x) < 1.0

    def value(self, x):
        x, m = self._inside(x)
        return np.where(m, self.scale * (x * x - 1.0) ** 4, 0.0)

    def d1(self, x):
        x, m = self._inside(x)
        return np.where(m, self.scale * 8.0 * x * (x * x - 1.0) ** 3, 0.0)

    def d2(self, x):
        x, m = self._inside(x)
        return np.where(m, self.scale * 8.0 * (x * x - 1.0) ** 2 * (7.0 * x * x - 1.0), 0.0)

    def describe(self) -> dict:
        return {"kind": "novoid", "scale": self.scale}


class Custom(Perturbation):
    """User-supplied perturbation; the callables are masked to zero for ``|x| >= R``."""

    def __init__(self, value_fn: Callable, d1_fn: Callable, d2_fn: Callable, R: float, label: str = "custom"):
        if not R > 0:
            raise InvalidParameter("support radius R must be positive")
        self._fns = (value_fn, d1_fn, d2_fn)
        self.R = float(R)
        self.label = label

    def _eval(self, k, x):
        x = np.asarray(x, dtype=float)
        inside = np.abs(x) < self.R
        out = np.zeros_like(x)
        if np.any(inside):
            out[inside] = self._fns[k](x[inside])
        return out if out.ndim else float(out)

    def value(self, x):
        return self._eval(0, x)

    def d1(self, x):
        return self._eval(1, x)

    def d2(self, x):
        return self._eval(2, x)

    def describe(self) -> dict:
        return {"kind": self.label, "R": self.R}


def zero_perturbation() -> Custom:
    z = lambda x: np.zeros_like(x)  # noqa: E731
    return Custom(z, z, z, R=1.0, label="zero")


def load_tabulated(path: str | Path) -> Custom:
    """Perturbation from a whitespace/comma separated table ``x psi [psi' psi'']``.

    Missing derivative columns are filled from a cubic spline through ``psi``; that
    route is lower fidelity (the spline second derivative is only piecewise linear).
    """
    from scipy.interpolate import CubicSpline

    text = Path(path).read_text().replace(",", " ")
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    data = np.array(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] not in (2, 3, 4):
        raise InvalidParameter(f"{path}: expected 2 to 4 columns, got shape {data.shape}")
    x = data[:, 0]
    if np.any(np.diff(x) <= 0):
        raise InvalidParameter(f"{path}: x column must be strictly increasing")
    spline = CubicSpline(x, data[:, 1])
    cols = [spline, spline.derivative(1), spline.derivative(2)]
    for k in range(1, data.shape[1] - 1):
        cols[k] = CubicSpline(x, data[:, k + 1])
    if data.shape[1] < 4:
        log.warning("%s: derivative columns missing, using cubic-spline derivatives", path)
    R = float(max(abs(x[0]), abs(x[-1])))
    return Custom(cols[0], cols[1], cols[2], R=R, label=f"tabulated:{Path(path).name}")


@dataclass(frozen=True)
class Potential:
    alpha: float
    psi: Perturbation

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidParameter(f"alpha must be positive, got {self.alpha}")

    @property
    def R(self) -> float:
        return self.psi.R

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * self.alpha * x * x + self.psi.value(x)

    def d1(self, x):
        x = np.asarray(x, dtype=float)
        return self.alpha * x + self.psi.d1(x)

    def d2(self, x):
        x = np.asarray(x, dtype=float)
        return self.alpha + self.psi.d2(x)

    @property
    def is_quadratic(self) -> bool:
        return isinstance(self.psi, Novoid) and self.psi.scale == 0.0 or getattr(self.psi, "label", "") == "zero"

    def describe(self) -> dict:
        return {"alpha": self.alpha, "psi": self.psi.describe()}


def quadratic(alpha: float) -> Potential:
    return Potential(alpha, zero_perturbation())


def sup_norms(psi: Perturbation, n_refine: int = 1) -> tuple[float, float, float]:
    """Sup norms of ``psi, psi', psi''`` on ``[-R, R]`` by successive grid doubling.

    The grid is symmetric and contains 0 and the endpoints. After at least
    ``n_refine`` doublings, sampling stops once every max moved by less than
    1e-6 relative; the results are converged lower bounds.
    """
    if n_refine < 1:
        raise InvalidParameter("n_refine must be >= 1")
    n = 1024
    x = np.linspace(-psi.R, psi.R, n + 1)
    prev = np.array([np.max(np.abs(f(x))) for f in (psi.value, psi.d1, psi.d2)])
    for k in range(1, MAX_DOUBLINGS + 1):
        n *= 2
        x = np.linspace(-psi.R, psi.R, n + 1)
        cur = np.array([np.max(np.abs(f(x))) for f in (psi.value, psi.d1, psi.d2)])
        rel = np.abs(cur - prev) / np.maximum(np.abs(cur), np.finfo(float).tiny)
        if k >= n_refine and np.all((rel < 1e-6) | (cur == prev)):
            return float(cur[0]), float(cur[1]), float(cur[2])
        prev = cur
    raise NoConvergence(f"sup norms not stable after {MAX_DOUBLINGS} doublings")


@dataclass(frozen=True)
class AdmissibilityReport:
    alpha: float
    R: float
    norm_psi: float
    norm_dpsi: float
    norm_ddpsi: float
    gamma: float
    b_star: float
    c_star: float
    admissible: bool
    c_interval: tuple[float, float]
    gamma_below_ddpsi_sq: bool
    reasons: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["c_interval"] = list(self.c_interval)
        d["reasons"] = list(self.reasons)
        return d


def b_star_formula(gamma: float, norm_ddpsi: float) -> float:
    # printed form: squared norm in the prefactor, first power under the root
    arg = 1.0 - 2.0 * (gamma + norm_ddpsi)
    if arg < 0:
        return math.nan
    return (gamma + norm_ddpsi**2) * 2.0 / (1.0 + math.sqrt(arg))


def c_star_formula(alpha: float, R: float, norm_psi: float, norm_dpsi: float) -> float:
    return (
        math.exp(-0.5 * alpha * (R + 2.0) ** 2)
        * math.exp(-norm_psi)
        * min(1.0, (alpha - 2.0 * norm_dpsi) / 4.0)
        / 20.0
    )


def admissibility_from_norms(alpha: float, R: float, norms: tuple[float, float, float]) -> AdmissibilityReport:
    if not alpha > 0:
        raise InvalidParameter(f"alpha must be positive, got {alpha}")
    n0, n1, n2 = norms
    gamma = n2 - alpha
    reasons = []
    if not 2.0 * n1 < alpha:
        reasons.append("2||psi'|| < alpha fails")
    if not alpha < n2:
        reasons.append("alpha < ||psi''|| fails")
    if not n2 < PSI_DD_CEILING:
        reasons.append("||psi''|| < 1e-1 fails")
    arg = 1.0 - 2.0 * (gamma + n2)
    if arg < 0:
        reasons.append("1 - 2(gamma + ||psi''||) < 0: b_* undefined")
    b_star = b_star_formula(gamma, n2)
    c_star = c_star_formula(alpha, R, n0, n1)
    if not (c_star > 2.0 * b_star):
        reasons.append("c_* > 2 b_* fails")
    return AdmissibilityReport(
        alpha=alpha,
        R=R,
        norm_psi=n0,
        norm_dpsi=n1,
        norm_ddpsi=n2,
        gamma=gamma,
        b_star=b_star,
        c_star=c_star,
        admissible=not reasons,
        c_interval=(2.0 * b_star, c_star),
        gamma_below_ddpsi_sq=bool(gamma < n2 * n2),
        reasons=tuple(reasons),
    )


def check_admissibility(alpha: float, psi: Perturbation) -> AdmissibilityReport:
    if not alpha > 0:
        raise InvalidParameter(f"alpha must be positive, got {alpha}")
    return admissibility_from_norms(alpha, psi.R, sup_norms(psi))


def novoid_candidate(a_param: float, scale: float) -> tuple[Potential, AdmissibilityReport]:
    """``alpha = scale * a_param`` and ``psi = scale * Psi``, checked directly."""
    psi = Novoid(scale)
    alpha = scale * a_param
    return Potential(alpha, psi), check_admissibility(alpha, psi)


def novoid_search(n_a: int = 200, n_scale: int = 200) -> tuple[float, float, AdmissibilityReport]:
    """Deterministic coarse-to-fine sweep for admissible ``(a_param, scale)``.

    ``a_param`` walks from the middle of ``(2||Psi'||, ||Psi''||)`` toward ``||Psi''||``
    on a geometric ladder of gaps; for each, ``scale`` runs over a log grid of the
    open window ``((||Psi''|| - a_param) / ||Psi''||^2, 1e-1 / ||Psi''||)``.
    """
    base = sup_norms(Novoid(1.0))
    n0, n1, n2 = base
    lo_a = 2.0 * n1
    gaps = np.geomspace(0.5 * (n2 - lo_a), 1e-7 * n2, n_a)
    tried = 0
    for gap in gaps:
        a_param = n2 - gap
        s_lo = (n2 - a_param) / n2**2
        s_hi = PSI_DD_CEILING / n2
        if s_lo >= s_hi:
            continue
        for s in np.geomspace(s_lo, s_hi, n_scale + 2)[1:-1]:
            tried += 1
            if tried > 10**6:
                raise NotFound("novoid sweep exhausted 1e6 candidates")
            rep = admissibility_from_norms(s * a_param, 1.0, (s * n0, s * n1, s * n2))
            if rep.admissible:
                final = check_admissibility(s * a_param, Novoid(float(s)))
                if final.admissible:
                    return float(a_param), float(s), final
    raise NotFound(f"no admissible pair among {tried} candidates")


def drift(U: Potential, z) -> np.ndarray:
    """``B(x, v) = (v, -U'(x) - v)`` for one point or an ``(..., 2)`` array."""
    z = np.asarray(z, dtype=float)
    x, v = z[..., 0], z[..., 1]
    return np.stack([v, -U.d1(x) - v], axis=-1)


@dataclass(frozen=True)
class RateConstants:
    kappa1: float
    kappa2: float
    kappa3: float
    kappa: float
    b: float
    c: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def kappa_prefactor(alpha: float) -> float:
    return 1.0 / ((alpha + 1.5 + math.sqrt((alpha - 0.5) ** 2 + 1.0)) / 2.0)


def rate_constants_from_norms(alpha: float, norms: tuple[float, float, float], b: float, *, check: bool = True) -> RateConstants:
    _, n1, n2 = norms
    gamma = n2 - alpha
    k1 = min(0.5 - n1, 0.5 * (alpha - 2.0 * n1))
    k2 = 0.5 * (0.5 - n2 - 0.5 * gamma)
    k3 = 0.5 * (0.5 * (b - gamma) - (n2 + b) ** 2 / (2.0 + 4.0 * b))
    kappa = kappa_prefactor(alpha) * min(0.5 * min(k1, k2), k3)
    if check:
        problems = []
        hyp = (n2 + b) ** 2 / (1.0 + 4.0 * b) + gamma
        if not b > hyp:
            problems.append(f"b = {b:g} <= (||psi''|| + b)^2 / (1 + 4b) + gamma = {hyp:g}")
        for name, k in (("kappa1", k1), ("kappa2", k2), ("kappa3", k3), ("kappa", kappa)):
            if not k > 0:
                problems.append(f"{name} = {k:g} <= 0")
        if problems:
            raise HypothesisViolated("; ".join(problems))
    return RateConstants(k1, k2, k3, kappa, b, 2.0 * b)


def rate_constants(alpha: float, psi: Perturbation, b: float) -> RateConstants:
    """Constants of the appendix lemma with ``c = 2b``, and the final contraction rate."""
    if not (alpha > 0 and b > 0):
        raise InvalidParameter("alpha and b must be positive")
    rep = check_admissibility(alpha, psi)
    if not b > rep.b_star:
        raise HypothesisViolated(f"b = {b:g} must exceed b_* = {rep.b_star:g}")
    return rate_constants_from_norms(alpha, (rep.norm_psi, rep.norm_dpsi, rep.norm_ddpsi), b)


def default_c_scale(report: AdmissibilityReport) -> float:
    """Midpoint of the admissible window ``(2 b_*, c_*)`` for the theorem matrix."""
    lo, hi = report.c_interval
    if not lo < hi:
        raise HypothesisViolated("empty c window")
    return 0.5 * (lo + hi)


def twisted_drift_pairing(U: Potential, A: TwistMatrix, z1, z2):
    """``-<B(z1) - B(z2), z1 - z2>_A`` (vectorized)."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    return -inner(A, drift(U, z1) - drift(U, z2), z1 - z2)

