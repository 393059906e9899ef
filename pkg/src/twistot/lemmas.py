"""Randomized checks of the two matrix/pointwise lemmas behind the key estimate."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dissipation import diss_identity_sides, term2_integrand
from .errors import HypothesisViolated, InvalidParameter
from .potential import (
    Perturbation,
    Potential,
    check_admissibility,
    rate_constants_from_norms,
    sup_norms,
)
from .twist import TwistMatrix, Vec2


@dataclass(frozen=True)
class SPDSample:
    m11: float
    m12: float
    m22: float

    def __post_init__(self):
        if not (self.m11 > 0 and self.m11 * self.m22 - self.m12**2 > 0):
            raise InvalidParameter(f"not SPD: {self}")

    @property
    def det(self) -> float:
        return self.m11 * self.m22 - self.m12**2

    def condition_number(self) -> float:
        return float(np.linalg.cond(np.array([[self.m11, self.m12], [self.m12, self.m22]])))


def random_spd(seed: int) -> SPDSample:
    """``G^T G + 1e-6 I`` with ``G`` uniform in ``[-3, 3]``."""
    G = np.random.default_rng(seed).uniform(-3.0, 3.0, size=(2, 2))
    M = G.T @ G + 1e-6 * np.eye(2)
    return SPDSample(float(M[0, 0]), float(M[0, 1]), float(M[1, 1]))


def _scale(lhs, rhs):
    return np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1.0)


# ---------------------------------------------------------------------- key2


def key2_sides(m11, m12, m22, b, c):
    det = m11 * m22 - m12 * m12
    lhs = ((m22 - c) ** 2 + (b * (m22 - c) - c * (m12 - b)) ** 2 / det) / m22
    rhs = (m12 - b) ** 2 / m11
    return lhs, rhs


def key2_gap(M: SPDSample, b: float, c: float) -> float:
    """``LHS - RHS`` of the matrix inequality (unnormalized)."""
    lhs, rhs = key2_sides(M.m11, M.m12, M.m22, b, c)
    return float(lhs - rhs)


def key2_normalized_gap(m11, m12, m22, b, c):
    lhs, rhs = key2_sides(m11, m12, m22, b, c)
    return (lhs - rhs) / _scale(lhs, rhs)


def key2_equality_m22(m11: float, m12: float, b: float, c: float) -> tuple[float, bool]:
    """Equality point ``m22 = c + (m12 - b) m12 / m11`` and whether it lies in the SPD cone."""
    if not m11 > 0:
        raise InvalidParameter("m11 must be positive")
    m22 = c + (m12 - b) * m12 / m11
    return m22, bool(m22 > m12 * m12 / m11)


def key2_cubic(x, m11, m12, b, c):
    """The cubic whose sign decides the inequality, as defined and in factored form."""
    g = (x - c) ** 2 * (x * m11 - m12**2) + (b * x - c * m12) ** 2 - (m12 - b) ** 2 * x / m11 * (x * m11 - m12**2)
    root = (c * m11 + (m12 - b) * m12) / m11
    factored = m11 * x * (x - root) ** 2
    return g, factored


# ---------------------------------------------------------------------- key1


@dataclass(frozen=True)
class Key1Params:
    alpha: float
    R: float
    norm_dpsi: float
    norm_ddpsi: float
    gamma: float
    b: float
    c: float
    kappa1: float
    kappa2: float
    kappa3: float

    @property
    def A(self) -> TwistMatrix:
        return TwistMatrix(self.b + self.c * self.alpha, self.b, self.c)


def key1_params(alpha: float, psi: Perturbation, b: float) -> Key1Params:
    """Constants of the pointwise lemma; needs admissibility and ``b > b_*``."""
    rep = check_admissibility(alpha, psi)
    if not rep.admissible:
        raise HypothesisViolated("; ".join(rep.reasons))
    if not b > rep.b_star:
        raise HypothesisViolated(f"b = {b:g} must exceed b_* = {rep.b_star:g}")
    norms = sup_norms(psi)
    rc = rate_constants_from_norms(alpha, norms, b)
    return Key1Params(alpha, psi.R, norms[1], norms[2], rep.gamma, b, 2.0 * b, rc.kappa1, rc.kappa2, rc.kappa3)


CASES = ("i", "ii", "iii")


def key1_classify(z1p, z2p, p: Key1Params, *, primed: bool = False) -> np.ndarray:
    """Case labels 0, 1, 2 for (i), (ii), (iii); -1 where no case applies.

    As printed, (ii) compares unprimed differences and (iii) bounds unprimed
    positions; ``primed=True`` uses primed quantities throughout (the reading the
    proof works with).
    """
    z1p = np.asarray(z1p, dtype=float)
    z2p = np.asarray(z2p, dtype=float)
    A = p.A.matrix
    z1, z2 = z1p @ A.T, z2p @ A.T
    q1, q2 = (z1p, z2p) if primed else (z1, z2)
    far = (np.abs(z1p[..., 0]) >= p.R + 1) | (np.abs(z2p[..., 0]) >= p.R + 1)
    near_p = (np.abs(z1p[..., 0]) <= p.R + 1) & (np.abs(z2p[..., 0]) <= p.R + 1)
    near_iii = (np.abs(q1[..., 0]) <= p.R + 1) & (np.abs(q2[..., 0]) <= p.R + 1)
    dx = np.abs(q1[..., 0] - q2[..., 0])
    dv = np.abs(q1[..., 1] - q2[..., 1])
    case = np.full(z1p.shape[:-1], -1, dtype=int)
    case[near_iii & (dx >= dv)] = 2
    case[near_p & (dx < dv)] = 1
    case[far] = 0
    return case


def key1_sides(z1p, z2p, U: Potential, p: Key1Params, case):
    """``(lhs, rhs)`` of the inequality attached to ``case`` (vectorized)."""
    z1p = np.asarray(z1p, dtype=float)
    z2p = np.asarray(z2p, dtype=float)
    A = p.A
    d = z1p - z2p
    x1, x2 = z1p[..., 0], z2p[..., 0]
    dU = U.d1(x1) - U.d1(x2)
    dB = np.stack([d[..., 1], -dU - d[..., 1]], axis=-1)
    pairing = -(A.a * dB[..., 0] * d[..., 0] + A.b * (dB[..., 0] * d[..., 1] + dB[..., 1] * d[..., 0]) + A.c * dB[..., 1] * d[..., 1])
    dist = d[..., 0] ** 2 + d[..., 1] ** 2
    dv_unprimed = A.b * d[..., 0] + A.c * d[..., 1]
    case = np.asarray(case)
    lhs = np.where(case == 2, pairing + dv_unprimed**2, pairing)
    k = np.select([case == 0, case == 1, case == 2], [p.c * p.kappa1, p.c * p.kappa2, p.kappa3], np.nan)
    return lhs, k * dist


def key1_case_gap(z1p: Vec2, z2p: Vec2, alpha: float, psi: Perturbation, b: float, *, primed: bool = False) -> tuple[str | None, float]:
    p = key1_params(alpha, psi, b)
    U = Potential(alpha, psi)
    z1 = np.array([z1p[0], z1p[1]], dtype=float)
    z2 = np.array([z2p[0], z2p[1]], dtype=float)
    case = int(key1_classify(z1, z2, p, primed=primed))
    if case < 0:
        return None, math.nan
    lhs, rhs = key1_sides(z1, z2, U, p, case)
    return CASES[case], float(lhs - rhs)


# --------------------------------------------------------------------- sweeps


@dataclass
class Verdict:
    name: str
    samples: int
    min_gap: float
    worst_case_inputs: dict
    passed: bool
    tolerance: float
    notes: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _worst(names, arrays, idx) -> dict:
    return {n: float(a[idx]) for n, a in zip(names, arrays)}


def sweep_key2(n: int = 10**5, seed: int = 0, tol: float = 1e-12) -> Verdict:
    """Random ``M = G^T G + 1e-6 I`` and ``b, c`` uniform in ``[-5, 5]``."""
    rng = np.random.default_rng([seed, 2])
    G = rng.uniform(-3.0, 3.0, size=(n, 2, 2))
    M = np.einsum("nki,nkj->nij", G, G) + 1e-6 * np.eye(2)
    b, c = rng.uniform(-5.0, 5.0, size=(2, n))
    m11, m12, m22 = M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]
    gap = key2_normalized_gap(m11, m12, m22, b, c)
    k = int(np.argmin(gap))
    return Verdict("key2", n, float(gap[k]), _worst(("m11", "m12", "m22", "b", "c"), (m11, m12, m22, b, c), k), bool(gap[k] >= -tol), tol)


def sweep_key2_equality(n: int = 10**5, seed: int = 0, tol: float = 1e-10) -> Verdict:
    """Points on the equality locus that fall inside the SPD cone."""
    rng = np.random.default_rng([seed, 3])
    m11 = rng.uniform(0.1, 10.0, n)
    m12, b, c = rng.uniform(-5.0, 5.0, size=(3, n))
    m22 = c + (m12 - b) * m12 / m11
    inside = m22 > m12 * m12 / m11
    m11, m12, m22, b, c = m11[inside], m12[inside], m22[inside], b[inside], c[inside]
    gap = np.abs(key2_normalized_gap(m11, m12, m22, b, c))
    k = int(np.argmax(gap))
    return Verdict(
        "key2_equality",
        int(inside.sum()),
        float(-gap[k]),
        _worst(("m11", "m12", "m22", "b", "c"), (m11, m12, m22, b, c), k),
        bool(gap[k] <= tol),
        tol,
        "min_gap is minus the largest |normalized gap| on the locus",
    )


def check_cubic_factorization(n_points: int = 100, n_instances: int = 100, seed: int = 0, tol: float = 1e-9) -> Verdict:
    rng = np.random.default_rng([seed, 4])
    worst, worst_in = 0.0, {}
    for _ in range(n_instances):
        m = random_spd(int(rng.integers(2**31)))
        b, c = rng.uniform(-5.0, 5.0, 2)
        x = np.linspace(m.m12**2 / m.m11, m.m12**2 / m.m11 + 20.0, n_points)
        g, fac = key2_cubic(x, m.m11, m.m12, b, c)
        err = np.abs(g - fac) / np.maximum(np.maximum(np.abs(g), np.abs(fac)), 1.0)
        if err.max() > worst:
            worst = float(err.max())
            worst_in = {"m11": m.m11, "m12": m.m12, "b": float(b), "c": float(c)}
    return Verdict("key2_cubic", n_instances * n_points, -worst, worst_in, bool(worst <= tol), tol, "min_gap is minus the worst relative mismatch")


def _key1_proposal(rng, n, R):
    span = R + 3.0
    z1 = np.stack([rng.uniform(-span, span, n), rng.uniform(-4.0, 4.0, n)], axis=-1)
    z2 = np.stack([rng.uniform(-span, span, n), rng.uniform(-4.0, 4.0, n)], axis=-1)
    return z1, z2


def sweep_key1(
    alpha: float,
    psi: Perturbation,
    b: float,
    n_per_case: int = 10**5,
    seed: int = 0,
    tol: float = 1e-12,
    *,
    primed: bool = False,
    max_rounds: int = 200,
) -> list[Verdict]:
    """Rejection-sample primed pairs until every case has ``n_per_case`` samples."""
    p = key1_params(alpha, psi, b)
    U = Potential(alpha, psi)
    rng = np.random.default_rng([seed, 5])
    kept = {k: [] for k in range(3)}
    counts = dict.fromkeys(range(3), 0)
    for _ in range(max_rounds):
        if all(counts[k] >= n_per_case for k in range(3)):
            break
        z1, z2 = _key1_proposal(rng, n_per_case, p.R)
        # half of the proposals are near-diagonal pairs to populate every case
        half = n_per_case // 2
        z2[:half] = z1[:half] + rng.normal(scale=0.3, size=(half, 2))
        case = key1_classify(z1, z2, p, primed=primed)
        for k in range(3):
            sel = case == k
            need = n_per_case - counts[k]
            if need > 0 and sel.any():
                idx = np.flatnonzero(sel)[:need]
                kept[k].append((z1[idx], z2[idx]))
                counts[k] += idx.size
    out = []
    for k in range(3):
        if not kept[k]:
            out.append(Verdict(f"key1_{CASES[k]}", 0, math.nan, {}, False, tol, "no samples landed in this case"))
            continue
        z1 = np.concatenate([a for a, _ in kept[k]])
        z2 = np.concatenate([b_ for _, b_ in kept[k]])
        lhs, rhs = key1_sides(z1, z2, U, p, k)
        gap = (lhs - rhs) / _scale(lhs, rhs)
        j = int(np.argmin(gap))
        worst = {"x1p": float(z1[j, 0]), "v1p": float(z1[j, 1]), "x2p": float(z2[j, 0]), "v2p": float(z2[j, 1])}
        note = "primed reading" if primed else "printed reading"
        dist = np.sum((z1 - z2) ** 2, axis=-1)
        big = dist > 1e-8
        claimed = (p.c * p.kappa1, p.c * p.kappa2, p.kappa3)[k]
        extra = {
            "claimed_constant": float(claimed),
            "empirical_constant": float(np.min(lhs[big] / dist[big])) if big.any() else math.nan,
            "violations": int(np.sum(gap < -tol)),
        }
        out.append(Verdict(f"key1_{CASES[k]}", int(z1.shape[0]), float(gap[j]), worst, bool(gap[j] >= -tol), tol, note, extra))
    return out


def sweep_diss_identity(n: int = 10**5, seed: int = 0, tol: float = 1e-10) -> Verdict:
    """Corrected integration-by-parts identity for random SPD ``H`` and ``b, c``."""
    rng = np.random.default_rng([seed, 6])
    G = rng.uniform(-3.0, 3.0, size=(n, 2, 2))
    H = np.einsum("nki,nkj->nij", G, G) + 1e-6 * np.eye(2)
    b, c = rng.uniform(-5.0, 5.0, size=(2, n))
    h11, h12, h22 = H[:, 0, 0], H[:, 0, 1], H[:, 1, 1]
    lhs, rhs, _ = diss_identity_sides(h11, h12, h22, b, c)
    err = np.abs(lhs - rhs) / _scale(lhs, rhs)
    k = int(np.argmax(err))
    return Verdict(
        "diss_identity",
        n,
        float(-err[k]),
        _worst(("h11", "h12", "h22", "b", "c"), (h11, h12, h22, b, c), k),
        bool(err[k] <= tol),
        tol,
        "min_gap is minus the worst relative mismatch",
    )


def field_key2_check(field, A: TwistMatrix, tol: float = 1e-12) -> Verdict:
    """Cell-by-cell: term2 integrand >= (h12 - b)^2 / h11 on a stored Brenier field."""
    s = field.support
    H = field.hessian[s]
    h11, h12, h22 = H[:, 0], H[:, 1], H[:, 2]
    ok = (h11 > 0) & (h11 * h22 - h12 * h12 > 0)
    h11, h12, h22 = h11[ok], h12[ok], h22[ok]
    lhs = term2_integrand(h11, h12, h22, A.b, A.c)
    rhs = (h12 - A.b) ** 2 / h11
    gap = (lhs - rhs) / _scale(lhs, rhs)
    if gap.size == 0:
        return Verdict("key2_field", 0, math.nan, {}, True, tol, "no SPD cells")
    k = int(np.argmin(gap))
    return Verdict("key2_field", int(gap.size), float(gap[k]), _worst(("h11", "h12", "h22"), (h11, h12, h22), k), bool(gap[k] >= -tol), tol)


def run_all(alpha: float, psi: Perturbation, b: float, n: int = 10**5, seed: int = 0, *, primed: bool = False) -> list[Verdict]:
    out = [sweep_key2(n, seed), sweep_key2_equality(n, seed), check_cubic_factorization(seed=seed), sweep_diss_identity(n, seed)]
    out += sweep_key1(alpha, psi, b, n, seed, primed=primed)
    return out


def write_verdicts(path: str | Path, verdicts: list[Verdict]) -> None:
    Path(path).write_text(json.dumps({v.name: v.to_dict() for v in verdicts}, indent=2))
