"""The dissipation functional ``J_A``, its Gaussian closed form and numerical checks.

For a pair of densities ``(f, g)`` with ``A^{-1} grad(phi)`` transporting ``g``
onto ``f`` and drift ``B(x, v) = (v, -U'(x) - v)``::

    J_A(f|g) = term1 + term2
    term1 = -int <B(T) - B(z), T - z>_A g(z) dz,            T = A^{-1} grad(phi)(z)
    term2 =  int h22^{-1} [(h22 - c)^2 + (b h22 - c h12)^2 / det H] g(z) dz,
             H = hess(phi) = [[h11, h12], [h12, h22]]

Gaussian sector (``psi = 0``, ``g = N(0, G)``, ``G = diag(1/alpha, 1)``,
``f = N(m, S)``). With ``R = A^{1/2}`` the twisted problem becomes the plain
quadratic one for ``R G R`` and ``R S R``; its optimal map is
``Lt = Gt^{-1/2} (Gt^{1/2} St Gt^{1/2})^{1/2} Gt^{-1/2}`` and pulling back gives the
affine map ``T z = L z + m`` with ``L = R^{-1} Lt R``. Then ``H = A L = R Lt R`` is
symmetric and constant, so term2 is the bracket evaluated once. The drift is
linear, ``B(z) = M z`` with ``M = [[0, 1], [-alpha, -1]]``, so with ``D = L - I``::

    <B(T) - B(z), T - z>_A = (D z + m)^T Q (D z + m),      Q = (M^T A + A M) / 2

and taking the expectation over ``z ~ N(0, G)`` (the cross term vanishes)::

    term1 = -[tr(Q D G D^T) + m^T Q m].

Along the exact moment flow of the linear equation ``term1 + term2`` equals
``-1/2 d/dt W_A^2(f_t, g)`` (the dissipation inequality is tight for Gaussians);
the tests check that by finite differences.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import DensityGrid, moments
from .errors import DegenerateInput, FieldMismatch, InvalidParameter
from .kfp import Trajectory, drift_matrix
from .potential import Potential, RateConstants, drift, rate_constants
from .transport import (
    BrenierField,
    brenier_fields,
    cell_cost,
    gaussian_map,
    gaussian_wa_sq,
    w_distance_series,
)
from .twist import TwistMatrix, norm_sq

log = logging.getLogger(__name__)

LADDER = (4.0, 2.0, 1.0)


# ------------------------------------------------------------------ integrand


def term2_integrand(h11, h12, h22, b: float, c: float):
    """``h22^{-1} [(h22 - c)^2 + (b h22 - c h12)^2 / det H]`` (vectorized)."""
    det = h11 * h22 - h12 * h12
    return ((h22 - c) ** 2 + (b * h22 - c * h12) ** 2 / det) / h22


def diss_identity_sides(h11, h12, h22, b, c):
    """Both sides of the corrected integration-by-parts identity.

    ``lhs = (b^2 h22 - 2 c b h12 + c^2 h11) / det H - c + (h22 - c)``;
    ``rhs = term2_integrand``. The printed variant with ``-c`` inside the
    ``1/det`` bracket is returned third for comparison.
    """
    det = h11 * h22 - h12 * h12
    lhs = (b * b * h22 - 2.0 * c * b * h12 + c * c * h11) / det - c + (h22 - c)
    rhs = term2_integrand(h11, h12, h22, b, c)
    printed = (b * b * h22 - 2.0 * c * b * h12 + c * c * h11 - c) / det + (h22 - c)
    return lhs, rhs, printed


# ---------------------------------------------------------------- Gaussian oracle


def equilibrium_cov(alpha: float) -> np.ndarray:
    return np.diag([1.0 / alpha, 1.0])


def gaussian_j_terms(mean, S, alpha: float, A: TwistMatrix) -> tuple[float, float]:
    """``(term1, term2)`` of ``J_A(N(mean, S) | f_inf)`` for the quadratic potential."""
    S = np.asarray(S, dtype=float)
    if not (S[0, 0] > 0 and np.linalg.det(S) > 0):
        raise InvalidParameter("S must be SPD")
    G = equilibrium_cov(alpha)
    L, u = gaussian_map(np.zeros(2), G, mean, S, A)
    Am = A.matrix
    M = drift_matrix(alpha)
    Q = 0.5 * (M.T @ Am + Am @ M)
    D = L - np.eye(2)
    term1 = -float(np.trace(Q @ D @ G @ D.T) + u @ Q @ u)
    H = Am @ L
    H = 0.5 * (H + H.T)
    term2 = float(term2_integrand(H[0, 0], H[0, 1], H[1, 1], A.b, A.c))
    return term1, term2


def gaussian_j_oracle(mean, S, alpha: float, A: TwistMatrix) -> float:
    t1, t2 = gaussian_j_terms(mean, S, alpha, A)
    return t1 + t2


def gaussian_j_monte_carlo(mean, S, alpha: float, A: TwistMatrix, n: int = 10**6, seed: int = 0) -> tuple[float, float]:
    """Sample mean and standard error of the ``J_A`` integrand under ``g = f_inf``.

    Uses the closed-form affine map but evaluates the drift pairing pointwise, so
    it checks the trace formula independently.
    """
    rng = np.random.default_rng(seed)
    G = equilibrium_cov(alpha)
    z = rng.multivariate_normal(np.zeros(2), G, size=n)
    L, u = gaussian_map(np.zeros(2), G, mean, S, A)
    T = z @ L.T + u
    Bdiff = (T - z) @ drift_matrix(alpha).T
    vals = -np.einsum("ni,ij,nj->n", Bdiff, A.matrix, T - z)
    H = A.matrix @ L
    H = 0.5 * (H + H.T)
    vals = vals + term2_integrand(H[0, 0], H[0, 1], H[1, 1], A.b, A.c)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def gaussian_wa_sq_to_equilibrium(mean, S, alpha: float, A: TwistMatrix) -> float:
    return gaussian_wa_sq(mean, S, np.zeros(2), equilibrium_cov(alpha), A)


# ----------------------------------------------------------------- estimator


@dataclass
class DissipationReport:
    term1: float
    term2: float
    j_total: float
    wa_sq: float
    ratio: float | None
    clamp_fraction: float
    eps_ladder: list[tuple[float, float]] = field(default_factory=list)
    j_raw: float = math.nan  # finest-epsilon value
    j_extrapolated: float = math.nan
    min_cell_term2: float = math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_ladder"] = [list(p) for p in self.eps_ladder]
        return d


def _ratio(j: float, wa_sq: float) -> float | None:
    return j / wa_sq if wa_sq > 1e-14 else None


def _field_terms(g: DensityGrid, A: TwistMatrix, U: Potential, fld: BrenierField) -> tuple[float, float, float, float, float]:
    if fld.grid != g.grid:
        raise FieldMismatch("Brenier field grid differs from the reference density grid")
    s = fld.support
    w = fld.source_weights[s]
    Z = g.grid.centers().reshape(*g.grid.shape, 2)[s]
    T = fld.map_values[s]
    d = T - Z
    t1 = -float(np.sum(w * np.einsum("ni,ij,nj->n", drift(U, T) - drift(U, Z), A.matrix, d)))
    H = fld.hessian[s]
    h11, h12, h22 = H[:, 0], H[:, 1], H[:, 2]
    det = np.maximum(h11 * h22 - h12 * h12, fld.delta_floor)
    cell = ((h22 - A.c) ** 2 + (A.b * h22 - A.c * h12) ** 2 / det) / h22
    t2 = float(np.sum(w * cell))
    wa = float(np.sum(w * norm_sq(A, d)))
    return t1, t2, wa, fld.clamp_fraction, float(cell.min())


def j_functional(f: DensityGrid, g: DensityGrid, A: TwistMatrix, U: Potential, field: BrenierField) -> DissipationReport:
    """Midpoint quadrature of ``J_A(f|g)`` against ``g`` for one Brenier field.

    ``wa_sq`` is the cost of the barycentric map, ``int |T - z|_A^2 g``.
    """
    t1, t2, wa, clamp, mn = _field_terms(g, A, U, field)
    j = t1 + t2
    return DissipationReport(t1, t2, j, wa, _ratio(j, wa), clamp, [(field.regularization, j)], j, math.nan, mn)


def richardson(eps, values) -> float:
    """Polynomial extrapolation of ``values(eps)`` to ``eps = 0`` (Neville)."""
    eps = np.asarray(eps, dtype=float)
    p = np.array(values, dtype=float)
    n = len(eps)
    for k in range(1, n):
        p[: n - k] = (eps[k:] * p[: n - k] - eps[: n - k] * p[1 : n - k + 1]) / (eps[k:] - eps[: n - k])
    return float(p[0])


def default_eps_ladder(grid, A: TwistMatrix, factors=LADDER) -> list[float]:
    base = cell_cost(grid, A)
    return [base * k for k in factors]


def j_functional_ladder(
    f: DensityGrid,
    g: DensityGrid,
    A: TwistMatrix,
    U: Potential,
    eps=None,
    *,
    mass_floor: float = 1e-6,
    delta_floor: float = 1e-8,
) -> DissipationReport:
    """``J_A`` on an epsilon-halving ladder with Richardson extrapolation.

    term1, term2 and ``wa_sq`` are extrapolated separately; ``j_raw`` is the
    finest-epsilon total.
    """
    eps = sorted(default_eps_ladder(g.grid, A) if eps is None else [float(e) for e in eps], reverse=True)
    fields = brenier_fields(f, g, A, eps, mass_floor=mass_floor, delta_floor=delta_floor)
    rows = [_field_terms(g, A, U, fl) for fl in fields]
    t1s, t2s, was, clamps, mins = (np.array(c) for c in zip(*rows))
    if len(eps) > 1:
        t1, t2, wa = (richardson(eps, arr) for arr in (t1s, t2s, was))
    else:
        t1, t2, wa = t1s[0], t2s[0], was[0]
    j = t1 + t2
    ladder = [(e, float(a + b)) for e, a, b in zip(eps, t1s, t2s)]
    return DissipationReport(
        float(t1),
        float(t2),
        float(j),
        float(wa),
        _ratio(j, wa),
        float(clamps.max()),
        ladder,
        ladder[-1][1],
        float(j),
        float(mins.min()),
    )


# -------------------------------------------------------------- verification


@dataclass
class DissipationCheck:
    t: float
    lhs: float
    rhs: float
    passed: bool
    tol: float
    tol_time: float
    tol_ot: float
    tol_eps: float

    @property
    def margin(self) -> float:
        return self.rhs + self.tol - self.lhs

    @property
    def dominant(self) -> str:
        items = {"time": self.tol_time, "ot": self.tol_ot, "eps": self.tol_eps}
        return max(items, key=items.get)


def _half_wa_sq_series(traj: Trajectory, sigma: DensityGrid, A: TwistMatrix, method: str, ot_kw: dict):
    """``W_A^2(f_k, sigma)`` per snapshot plus a per-snapshot error estimate."""
    if method == "gaussian":
        ms, mref = [moments(f) for f in traj.snapshots], moments(sigma)
        w = np.array([gaussian_wa_sq(np.array(m), S, np.array(mref[0]), mref[1], A) for m, S in ms])
        return w, np.zeros_like(w)
    if method == "sinkhorn":
        kw = dict(ot_kw)
        series = w_distance_series(traj.snapshots, sigma, A, **kw)
        # debiased bias is O(eps^2): the gap to the 2*eps run, divided by 3, estimates it
        kw["eps"] = 2.0 * series.eps
        coarse = w_distance_series(traj.snapshots, sigma, A, **kw)
        return series.wa_sq, np.abs(coarse.wa_sq - series.wa_sq) / 3.0
    raise InvalidParameter(f"unknown distance method {method!r}")


def verify_dissipation(
    traj: Trajectory,
    A: TwistMatrix,
    U: Potential,
    sigma: DensityGrid,
    *,
    rhs: str = "oracle",
    distance: str = "sinkhorn",
    safety: float = 2.0,
    ot_kw: dict | None = None,
    j_kw: dict | None = None,
) -> list[DissipationCheck]:
    """Check ``1/2 d/dt W_A^2(f_t, sigma) <= -J_A(f_t|sigma)`` at interior snapshots.

    lhs is the central difference of ``W_A^2 / 2`` over the neighbouring snapshots.
    ``rhs = "oracle"`` evaluates the Gaussian closed form at the snapshot moments
    (quadratic potential, ``sigma = f_inf``); ``rhs = "numeric"`` runs the
    extrapolated estimator. The tolerance is ``safety * (time + ot + eps)`` with

    * time: ``dt^2 / 6 * max |d^3/dt^3 (W^2 / 2)|`` from cubic fits on the 4-point
      windows covering the stencil,
    * ot: ``(err_{k+1} + err_{k-1}) / (2 (t_{k+1} - t_{k-1}))`` from the distance errors,
    * eps: ``|J_raw - J_extrapolated|`` (zero for the oracle).
    """
    if len(traj) < 3:
        raise DegenerateInput("need at least 3 snapshots")
    ts = np.array(traj.times)
    w, werr = _half_wa_sq_series(traj, sigma, A, distance, ot_kw or {})
    half = 0.5 * w
    if rhs == "oracle" and not U.is_quadratic:
        raise InvalidParameter("the Gaussian oracle needs a quadratic potential")
    out = []
    for k in range(1, len(ts) - 1):
        span = ts[k + 1] - ts[k - 1]
        lhs = (half[k + 1] - half[k - 1]) / span
        # the difference error involves the third derivative somewhere in the
        # stencil: take the largest cubic-fit estimate over 4-point windows covering it
        d3 = 0.0
        for lo in {max(0, min(j, len(ts) - 4)) for j in (k - 2, k - 1)}:
            seg_t, seg_w = ts[lo : lo + 4], half[lo : lo + 4]
            if len(seg_t) == 4:
                d3 = max(d3, abs(np.polyfit(seg_t - seg_t.mean(), seg_w, 3)[0]) * 6.0)
        h = 0.5 * span
        tol_time = h * h / 6.0 * d3
        tol_ot = (werr[k + 1] + werr[k - 1]) / (2.0 * span)
        if rhs == "oracle":
            m, S = moments(traj.snapshots[k])
            j = gaussian_j_oracle(np.array(m), S, U.alpha, A)
            tol_eps = 0.0
        elif rhs == "numeric":
            rep = j_functional_ladder(traj.snapshots[k], sigma, A, U, **(j_kw or {}))
            j = rep.j_total
            tol_eps = abs(rep.j_raw - rep.j_extrapolated)
        else:
            raise InvalidParameter(f"unknown rhs {rhs!r}")
        tol = safety * (tol_time + tol_ot + tol_eps)
        r = -j
        out.append(DissipationCheck(float(ts[k]), float(lhs), float(r), bool(lhs <= r + tol), tol, tol_time, tol_ot, tol_eps))
    return out


@dataclass
class KeyCheck:
    kappa_required: float
    ratio: float | None
    passed: bool
    vacuous: bool
    j: float
    wa_sq: float
    report: DissipationReport | None = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "report"}
        if self.report is not None:
            d["report"] = self.report.to_dict()
        return d


def theorem_kappa(U: Potential, A: TwistMatrix) -> RateConstants:
    """Rate constants for the theorem matrix ``A`` (``b = A.b``, ``c = 2 b``)."""
    if not math.isclose(A.c, 2.0 * A.b, rel_tol=1e-12):
        raise InvalidParameter("A must be a theorem matrix (c = 2b)")
    return rate_constants(U.alpha, U.psi, A.b)


def verify_key_inequality(
    f: DensityGrid | tuple,
    A: TwistMatrix,
    U: Potential,
    *,
    kappa: float | None = None,
    sigma: DensityGrid | None = None,
    vacuous_below: float = 1e-14,
    **kw,
) -> KeyCheck:
    """``kappa W_A^2(f, f_inf) <= J_A(f|f_inf)``.

    ``f`` is either a grid density (numeric estimator against ``sigma``) or a
    ``(mean, S)`` pair for the Gaussian closed form (quadratic potential). ``kappa``
    defaults to the theorem constant for ``(U, A)``.
    """
    if kappa is None:
        kappa = theorem_kappa(U, A).kappa
    rep = None
    if isinstance(f, tuple):
        mean, S = f
        j = gaussian_j_oracle(mean, S, U.alpha, A)
        wa = gaussian_wa_sq_to_equilibrium(mean, S, U.alpha, A)
    else:
        if sigma is None:
            raise InvalidParameter("numeric check needs the equilibrium density sigma")
        rep = j_functional_ladder(f, sigma, A, U, **kw)
        j, wa = rep.j_total, rep.wa_sq
    if wa <= vacuous_below * max(A.c, A.a):
        return KeyCheck(kappa, None, True, True, j, wa, rep)
    ratio = j / wa
    return KeyCheck(kappa, ratio, bool(ratio >= kappa), False, j, wa, rep)


# ------------------------------------------------------------------ decay fit


@dataclass
class RateFit:
    times: np.ndarray
    distances: np.ndarray
    slope: float
    intercept: float
    r_squared: float

    @property
    def kappa_observed(self) -> float:
        return -self.slope

    def to_dict(self) -> dict:
        return {
            "times": list(map(float, self.times)),
            "distances": list(map(float, self.distances)),
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "kappa_observed": self.kappa_observed,
        }


def fit_decay_rate(times, distances) -> RateFit:
    """Least squares of ``ln d`` on ``t``."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(distances, dtype=float)
    if t.size < 5 or t.size != d.size:
        raise DegenerateInput("need at least 5 (t, d) pairs")
    if np.any(np.diff(t) <= 0):
        raise DegenerateInput("times must be strictly increasing")
    if np.any(~(d > 0)):
        raise DegenerateInput("distances must be positive")
    y = np.log(d)
    tc = t - t.mean()
    slope = float(tc @ (y - y.mean()) / (tc @ tc))
    intercept = float(y.mean() - slope * t.mean())
    res = y - (intercept + slope * t)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(res @ res) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(t, d, slope, intercept, r2)


def monotone_nonincreasing(values, tol: float) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) <= tol))


# ---------------------------------------------------------------------- I/O

DECAY_COLUMNS = ("t", "W_A", "W_2", "J_A_raw", "J_A_extrapolated", "H_rel_entropy", "mass")


def write_decay_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DECAY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in DECAY_COLUMNS})


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not serializable: {type(o)}")
