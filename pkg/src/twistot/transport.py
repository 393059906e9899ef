"""Discrete optimal transport for the twisted quadratic cost ``|z1 - z2|_A^2``."""
from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .equilibrium import DensityGrid, PhaseGrid
from .errors import InvalidParameter, NoConvergence, SizeExceeded
from .twist import IDENTITY, TwistMatrix, apply, norm_sq, sqrt_spd, sym_sqrt

log = logging.getLogger(__name__)

EXACT_MAX_ENTRIES = 20_000_000
BRUTE_MAX_ATOMS = 8


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,)
    cells: np.ndarray | None = None  # flat grid indices when built from a density
    grid: PhaseGrid | None = None
    dropped_mass: float = 0.0

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.atoms.shape[0] != self.weights.shape[0] or self.atoms.shape[0] == 0:
            raise InvalidParameter("atoms and weights must be non-empty and of equal length")
        if np.any(self.weights <= 0):
            raise InvalidParameter("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidParameter(f"weights sum to {self.weights.sum():.15g}, not 1")

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float).reshape(-1, 2)
        return cls(atoms, np.full(atoms.shape[0], 1.0 / atoms.shape[0]))

    @property
    def n(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def cov(self) -> np.ndarray:
        d = self.atoms - self.mean()
        return (d * self.weights[:, None]).T @ d


@dataclass
class Coupling:
    source: DiscreteMeasure
    target: DiscreteMeasure
    plan: np.ndarray

    def __post_init__(self):
        P = self.plan
        if P.shape != (self.source.n, self.target.n):
            raise InvalidParameter("plan shape does not match the marginals")
        if np.any((P.data if sp.issparse(P) else P) < 0):
            raise InvalidParameter("plan has negative entries")

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.plan.sum(axis=1)).ravel()

    def col_sums(self) -> np.ndarray:
        return np.asarray(self.plan.sum(axis=0)).ravel()

    def marginal_errors(self) -> tuple[float, float]:
        r = np.max(np.abs(self.row_sums() - self.source.weights))
        c = np.max(np.abs(self.col_sums() - self.target.weights))
        return float(r), float(c)

    def check(self, tol: float = 1e-9) -> None:
        r, c = self.marginal_errors()
        if r > tol or c > tol:
            raise NoConvergence(f"coupling marginals off by {max(r, c):.2e} > {tol:g}")

    def triples(self, threshold: float = 0.0):
        i, j, m = sp.find(sp.csr_matrix(self.plan))
        keep = m > threshold
        order = np.lexsort((j[keep], i[keep]))
        return i[keep][order], j[keep][order], m[keep][order]

    def write(self, path: str | Path, threshold: float = 0.0) -> None:
        """Sparse ``i j mass`` text export (0-based atom indices)."""
        i, j, m = self.triples(threshold)
        with open(path, "w") as fh:
            fh.write(f"# plan {self.source.n} {self.target.n} {i.size}\n")
            for a, b, w in zip(i, j, m):
                fh.write(f"{int(a)} {int(b)} {float(w)!r}\n")


def read_plan(path: str | Path) -> tuple[tuple[int, int], np.ndarray, np.ndarray, np.ndarray]:
    with open(path) as fh:
        _, _, n, m, _ = fh.readline().split()
        data = np.loadtxt(fh, ndmin=2)
    return (int(n), int(m)), data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2]


def cost_matrix(mu: DiscreteMeasure, nu: DiscreteMeasure, A: TwistMatrix) -> np.ndarray:
    d = mu.atoms[:, None, :] - nu.atoms[None, :, :]
    return norm_sq(A, d)


def from_density(f: DensityGrid, mass_floor: float = 0.0) -> DiscreteMeasure:
    """Atoms at cell centers; cells with mass below ``mass_floor * max`` are dropped."""
    if not 0.0 <= mass_floor <= 1e-6:
        raise InvalidParameter("mass_floor must lie in [0, 1e-6]")
    m = f.cell_masses().ravel()
    keep = m > 0 if mass_floor == 0 else m >= mass_floor * m.max()
    if mass_floor == 0:
        keep = np.ones_like(m, dtype=bool) if np.all(m > 0) else m > 0
    total = m.sum()
    dropped = float(m[~keep].sum() / total)
    if dropped > 0:
        log.debug("from_density: dropped mass %.3e in %d cells", dropped, int((~keep).sum()))
    cells = np.flatnonzero(keep)
    w = m[cells] / m[cells].sum()
    atoms = f.grid.centers()[cells]
    return DiscreteMeasure(atoms, w, cells=cells, grid=f.grid, dropped_mass=dropped)


def coarsen(f: DensityGrid, factor: int | tuple[int, int]) -> DensityGrid:
    """Aggregate blocks of ``fx x fv`` cells (mass preserving); an int means square blocks."""
    fx, fv = (factor, factor) if isinstance(factor, int) else factor
    if fx == 1 and fv == 1:
        return f
    g = f.grid
    if fx < 1 or fv < 1 or g.nx % fx or g.nv % fv:
        raise InvalidParameter("grid size not divisible by the coarsening factor")
    m = f.cell_masses().reshape(g.nx // fx, fx, g.nv // fv, fv).sum(axis=(1, 3))
    cg = PhaseGrid(g.Lx, g.Lv, g.nx // fx, g.nv // fv)
    return DensityGrid(cg, m / cg.cell_area)


def cell_cost(grid: PhaseGrid, A: TwistMatrix) -> float:
    """Largest twisted cost of a single cell step; the default entropic scale for grid data."""
    return float(max(A.a * grid.dx**2, A.c * grid.dv**2))


# --------------------------------------------------------------------------- exact


@dataclass
class OTResult:
    cost: float
    coupling: Coupling
    dual_gap: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def plan(self) -> np.ndarray:
        return self.coupling.plan


def _pot():
    for key in ("POT_BACKEND_DISABLE_TENSORFLOW", "POT_BACKEND_DISABLE_PYTORCH", "POT_BACKEND_DISABLE_JAX", "POT_BACKEND_DISABLE_CUPY"):
        os.environ.setdefault(key, "1")
    import ot

    return ot


def exact_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, A: TwistMatrix = IDENTITY) -> OTResult:
    """Network-simplex solve of the transportation problem, certified by the duality gap."""
    if mu.n * nu.n > EXACT_MAX_ENTRIES:
        raise SizeExceeded(f"{mu.n} x {nu.n} exceeds the exact-solver guard {EXACT_MAX_ENTRIES}")
    ot = _pot()
    C = np.ascontiguousarray(cost_matrix(mu, nu, A))
    a = mu.weights.copy()
    b = nu.weights.copy()
    b *= a.sum() / b.sum()
    P, info = ot.emd(a, b, C, numItermax=max(10**7, 50 * mu.n * nu.n), log=True)
    if info.get("warning"):
        raise NoConvergence(f"network simplex: {info['warning']}")
    cost = float(np.sum(P * C))
    u, v = info["u"], info["v"]
    dual = float(a @ u + b @ v)
    gap = abs(cost - dual)
    scale = max(cost, float(C.max()) * 1e-6, 1e-300)
    if gap > 1e-9 * scale + 1e-15:
        raise NoConvergence(f"duality gap {gap:.3e} above 1e-9 relative")
    slack = float(np.min(C - u[:, None] - v[None, :]))
    if slack < -1e-9 * max(float(C.max()), 1e-300):
        raise NoConvergence(f"dual infeasible by {slack:.3e}")
    coup = Coupling(mu, nu, np.maximum(P, 0.0))
    coup.check(1e-9)
    return OTResult(cost, coup, gap, {"dual_slack": slack})


def brute_force_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, A: TwistMatrix = IDENTITY) -> OTResult:
    """Exhaustive optimum for tiny instances.

    Equal-weight measures with the same atom count: enumerate permutations
    (Birkhoff). Otherwise enumerate candidate bases of ``m + n - 1`` cells of the
    transportation polytope and keep the cheapest feasible vertex.
    """
    m, n = mu.n, nu.n
    C = cost_matrix(mu, nu, A)
    uniform = m == n and np.allclose(mu.weights, 1.0 / m, rtol=0, atol=1e-15) and np.allclose(nu.weights, 1.0 / n, rtol=0, atol=1e-15)
    if uniform:
        if n > BRUTE_MAX_ATOMS:
            raise SizeExceeded(f"brute force limited to {BRUTE_MAX_ATOMS} atoms")
        perms = np.array(list(itertools.permutations(range(n))))
        costs = C[np.arange(n)[None, :], perms].sum(axis=1) / n
        k = int(np.argmin(costs))
        P = np.zeros((n, n))
        P[np.arange(n), perms[k]] = 1.0 / n
        return OTResult(float(costs[k]), Coupling(mu, nu, P))
    k = m + n - 1
    if math.comb(m * n, k) > 200_000:
        raise SizeExceeded("instance too large for vertex enumeration")
    # equality constraints: row sums and column sums (one redundant, dropped)
    E = np.zeros((m + n, m * n))
    for i in range(m):
        E[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        E[m + j, j::n] = 1.0
    rhs = np.concatenate([mu.weights, nu.weights])
    E, rhs = E[:-1], rhs[:-1]
    best, best_x = math.inf, None
    flatC = C.ravel()
    for basis in itertools.combinations(range(m * n), k):
        B = E[:, basis]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xb = np.linalg.solve(B, rhs)
        if np.any(xb < -1e-12):
            continue
        val = float(flatC[list(basis)] @ xb)
        if val < best:
            best = val
            best_x = np.zeros(m * n)
            best_x[list(basis)] = np.maximum(xb, 0.0)
    return OTResult(best, Coupling(mu, nu, best_x.reshape(m, n)))


# ------------------------------------------------------------------------ entropic


@dataclass
class SinkhornResult:
    cost: float  # debiased Sinkhorn divergence (nan when not requested)
    ot_eps: float  # raw entropic OT value at the final epsilon
    transport_cost: float  # <C, P>
    f: np.ndarray
    g: np.ndarray
    coupling: Coupling
    eps: float
    schedule: list[float]
    iterations: int

    @property
    def plan(self) -> np.ndarray:
        return self.coupling.plan


class _LogSinkhorn:
    """Stabilized Sinkhorn: kernel recomputed from absorbed log-potentials.

    ``P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)``; inner iterations run on
    scalings ``u, v`` and are folded back into ``f, g`` whenever they drift by more
    than ``exp(+-absorb)`` or at every change of ``eps``.

    Kernel entries more than ``exp(-truncate)`` below both their row and column
    maximum are dropped and the kernel is stored sparse once it is thin enough.

    With ``symmetric=True`` (same measure on both sides, symmetric cost) the
    averaged update ``u <- sqrt(u / Ku)`` is used and ``f == g`` throughout. Plain
    alternating sweeps leave ``f_i - g_i`` nearly free at isolated atoms and can
    crawl there for thousands of sweeps; the averaged map has no such mode.
    """

    absorb = 30.0
    truncate = 40.0
    dense_fill = 0.25
    warmup = 10
    omega = 1.9

    def __init__(self, C: np.ndarray, a: np.ndarray, b: np.ndarray, symmetric: bool = False):
        self.C = C
        self.a = a
        self.b = b
        self.symmetric = symmetric
        self.f = np.zeros(a.size)
        self.g = np.zeros(b.size)
        self.iterations = 0

    def _kernel(self, eps):
        X = self.f[:, None] + self.g[None, :]
        X -= self.C
        X /= eps
        keep = X > (X.max(axis=1, keepdims=True) - self.truncate)
        keep |= X > (X.max(axis=0, keepdims=True) - self.truncate)
        if keep.mean() > self.dense_fill:
            np.exp(X, out=X)
            X[~keep] = 0.0
            return X
        i, j = np.nonzero(keep)
        vals = np.exp(X[i, j])
        del X, keep
        return sp.csr_matrix((vals, (i, j)), shape=self.C.shape)

    def _lse_update(self, eps):
        # exact log-domain half steps; used when a scaling underflows
        from scipy.special import logsumexp

        if self.symmetric:
            t = -eps * logsumexp((self.f[None, :] - self.C) / eps, axis=1, b=self.a[None, :])
            self.f = 0.5 * (self.f + t)
            self.g = self.f.copy()
            return
        self.f = -eps * logsumexp((self.g[None, :] - self.C) / eps, axis=1, b=self.b[None, :])
        self.g = -eps * logsumexp((self.f[:, None] - self.C) / eps, axis=0, b=self.a[:, None])

    def solve(self, eps: float, tol: float, max_iter: int) -> float:
        """Sweeps at fixed ``eps`` until the L1 row-marginal error drops below ``tol``.

        After ``warmup`` plain sweeps the updates are over-relaxed,
        ``u <- u^(1-omega) (1/Kv)^omega``; if the error climbs two decades above its
        best value the solver falls back to plain sweeps for the rest of the level.
        """
        K = self._kernel(eps)
        u = np.ones(self.a.size)
        v = np.ones(self.b.size)
        err = math.inf
        best = math.inf
        omega = 1.0
        for it in range(1, max_iter + 1):
            s = K @ (self.b * v)
            err = float(np.sum(self.a * np.abs(u * s - 1.0)))
            if err < tol and it > 1:
                break
            if it > 1:
                best = min(best, err)
            if it == self.warmup:
                omega = self.omega
            if omega > 1.0 and err > 100.0 * best:
                omega = 1.0
            if self.symmetric:
                u = np.sqrt(u / s)
                v = u
            elif omega == 1.0:
                u = 1.0 / s
                v = 1.0 / (K.T @ (self.a * u))
            else:
                u = u ** (1.0 - omega) * s ** (-omega)
                v = v ** (1.0 - omega) * (K.T @ (self.a * u)) ** (-omega)
            self.iterations += 1
            bad = not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(u > 0) and np.all(v > 0))
            if bad or np.max(np.abs(np.log(u))) > self.absorb or np.max(np.abs(np.log(v))) > self.absorb:
                if bad:
                    self._lse_update(eps)
                else:
                    self._absorb(eps, u, v)
                K = self._kernel(eps)
                u = np.ones(self.a.size)
                v = np.ones(self.b.size)
        else:
            raise NoConvergence(f"Sinkhorn at eps={eps:g}: marginal error {err:.2e} after {max_iter} sweeps")
        self._absorb(eps, u, v)
        return err

    def _absorb(self, eps, u, v):
        self.f = self.f + eps * np.log(u)
        self.g = self.f.copy() if self.symmetric else self.g + eps * np.log(v)

    def plan(self, eps):
        """Plan at the current potentials (sparse when the kernel is)."""
        P = self._kernel(eps)
        if sp.issparse(P):
            return sp.diags(self.a) @ P @ sp.diags(self.b)
        P *= self.a[:, None]
        P *= self.b[None, :]
        return P

    def value(self) -> float:
        return float(self.a @ self.f + self.b @ self.g)


def diameter_sq(mu: DiscreteMeasure, nu: DiscreteMeasure, A: TwistMatrix) -> float:
    pts = np.vstack([mu.atoms, nu.atoms])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    corners = np.array([[hi[0] - lo[0], hi[1] - lo[1]], [hi[0] - lo[0], lo[1] - hi[1]]])
    return float(np.max(norm_sq(A, corners)))


def eps_schedule(eps_start: float, eps_target: float, factor: float = 0.7) -> list[float]:
    if not (0 < factor < 1):
        raise InvalidParameter("schedule factor must lie in (0, 1)")
    out = []
    e = eps_start
    while e > eps_target:
        out.append(e)
        e *= factor
    out.append(eps_target)
    return out


def _plan_cost(P, C) -> float:
    if sp.issparse(P):
        return float(P.multiply(C).sum())
    return float(np.sum(P * C))


def _solve_ladder(solver: _LogSinkhorn, schedule, tol, max_iter, stage_tol=1e-5):
    for k, e in enumerate(schedule):
        last = k == len(schedule) - 1
        solver.solve(e, tol if last else max(tol, stage_tol), max_iter)


def sinkhorn(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    A: TwistMatrix = IDENTITY,
    eps_target: float | None = None,
    schedule: float = 0.7,
    *,
    eps_rel: float = 1e-3,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    debias: bool = True,
) -> SinkhornResult:
    """Entropic OT with epsilon scaling from ``diam_A^2`` down to ``eps_target``.

    The default target is ``eps_rel * diam_A^2``. Returns the raw ``OT_eps``, the
    debiased divergence ``OT_eps(mu, nu) - (OT_eps(mu, mu) + OT_eps(nu, nu)) / 2``
    and the plan at the final epsilon.
    """
    diam = diameter_sq(mu, nu, A)
    if eps_target is None:
        eps_target = eps_rel * diam
    if not eps_target > 0:
        raise InvalidParameter("eps_target must be positive")
    sched = eps_schedule(max(diam, eps_target), eps_target, schedule)
    C = cost_matrix(mu, nu, A)
    same = mu is nu or (
        mu.n == nu.n and np.array_equal(mu.atoms, nu.atoms) and np.array_equal(mu.weights, nu.weights)
    )
    solver = _LogSinkhorn(C, mu.weights, nu.weights, symmetric=same)
    _solve_ladder(solver, sched, tol, max_iter)
    P = solver.plan(eps_target)
    ot_eps = solver.value()
    iters = solver.iterations
    del C
    div = math.nan
    if debias:
        selfs = []
        for m in (mu, nu):
            Cs = cost_matrix(m, m, A)
            s = _LogSinkhorn(Cs, m.weights, m.weights, symmetric=True)
            _solve_ladder(s, sched, tol, max_iter)
            selfs.append(s.value())
            iters += s.iterations
            del Cs
        div = ot_eps - 0.5 * (selfs[0] + selfs[1])
    coup = Coupling(mu, nu, P)
    tc = _plan_cost(P, cost_matrix(mu, nu, A))
    return SinkhornResult(div, ot_eps, tc, solver.f, solver.g, coup, eps_target, sched, iters)


# ------------------------------------------------------------------- distances


def _measures(f: DensityGrid, g: DensityGrid, mass_floor: float, coarsen_by: int):
    f, g = coarsen(f, coarsen_by), coarsen(g, coarsen_by)
    return from_density(f, mass_floor), from_density(g, mass_floor)


def w_distance(
    f: DensityGrid,
    g: DensityGrid,
    A: TwistMatrix = IDENTITY,
    method: str = "exact",
    *,
    mass_floor: float = 1e-12,
    coarsen_by: int = 1,
    **kw,
) -> float:
    """``W_A(f, g)`` between grid densities: ``exact`` network simplex or debiased ``sinkhorn``."""
    return math.sqrt(max(w_distance_sq(f, g, A, method, mass_floor=mass_floor, coarsen_by=coarsen_by, **kw), 0.0))


def w_distance_sq(f, g, A=IDENTITY, method="exact", *, mass_floor=1e-12, coarsen_by=1, **kw) -> float:
    mu, nu = _measures(f, g, mass_floor, coarsen_by)
    if method == "exact":
        return exact_ot(mu, nu, A).cost
    if method == "sinkhorn":
        return sinkhorn(mu, nu, A, **kw).cost
    raise InvalidParameter(f"unknown OT method {method!r}")


@dataclass
class DistanceSeries:
    """Debiased entropic ``W_A^2`` of a sequence of densities against one reference."""

    wa_sq: np.ndarray
    raw: np.ndarray
    eps: float
    n_atoms: int
    iterations: int
    cold_starts: int

    @property
    def wa(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.wa_sq, 0.0))


def w_distance_series(
    densities,
    ref: DensityGrid,
    A: TwistMatrix = IDENTITY,
    *,
    eps: float | None = None,
    mass_floor: float = 1e-6,
    coarsen_by: int | tuple[int, int] = 1,
    schedule: float = 0.7,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> DistanceSeries:
    """``W_A^2(f_k, ref)`` for a time series, warm-starting each solve from the previous one.

    All measures share one atom set (the union of their above-floor cells) so the
    cost matrix and the potentials carry over; ``OT_eps(ref, ref)`` is solved once.
    ``eps`` defaults to :func:`cell_cost` of the (coarsened) grid.
    """
    ref_c = coarsen(ref, coarsen_by)
    fs = [coarsen(f, coarsen_by) for f in densities]
    if any(f.grid != ref_c.grid for f in fs):
        raise InvalidParameter("all densities must share the reference grid")
    grid = ref_c.grid
    masses = [f.cell_masses().ravel() for f in fs]
    mref = ref_c.cell_masses().ravel()
    floor = mass_floor if mass_floor > 0 else 0.0
    keep = mref >= floor * mref.max() if floor else mref > 0
    for m in masses:
        keep |= m >= floor * m.max() if floor else m > 0
    cells = np.flatnonzero(keep)
    atoms = grid.centers()[cells]
    if eps is None:
        eps = cell_cost(grid, A)

    def weights(m):
        w = m[cells] / m[cells].sum()
        w = np.maximum(w, 1e-18 * w.max())
        return w / w.sum()

    C = norm_sq(A, atoms[:, None, :] - atoms[None, :, :])
    diam = diameter_sq(DiscreteMeasure.uniform(atoms), DiscreteMeasure.uniform(atoms), A)
    ladder = eps_schedule(max(diam, eps), eps, schedule)
    iters = 0
    cold = 0

    def run(a, b, state):
        nonlocal iters, cold
        sym = a is b
        s = _LogSinkhorn(C, a, b, symmetric=sym)
        if state is not None:
            s.f, s.g = state[0].copy(), state[1].copy()
            try:
                s.solve(eps, tol, max_iter)
                iters += s.iterations
                return s
            except NoConvergence:
                s = _LogSinkhorn(C, a, b, symmetric=sym)
        cold += 1
        _solve_ladder(s, ladder, tol, max_iter)
        iters += s.iterations
        return s

    wref = weights(mref)
    ref_self = run(wref, wref, None).value()
    cross_state = self_state = None
    out, raw = [], []
    for m in masses:
        w = weights(m)
        sc = run(w, wref, cross_state)
        cross_state = (sc.f, sc.g)
        ss = run(w, w, self_state)
        self_state = (ss.f, ss.g)
        raw.append(sc.value())
        out.append(sc.value() - 0.5 * (ss.value() + ref_self))
    return DistanceSeries(np.array(out), np.array(raw), float(eps), int(cells.size), iters, cold)


def gaussian_wa_sq(m1, S1, m2, S2, A: TwistMatrix = IDENTITY) -> float:
    """Bures formula after the change of variables ``z -> A^{1/2} z``."""
    R = sqrt_spd(A).matrix
    m1, m2 = np.asarray(m1, float), np.asarray(m2, float)
    T1 = R @ np.asarray(S1, float) @ R
    T2 = R @ np.asarray(S2, float) @ R
    r1 = sym_sqrt(T1)
    cross = sym_sqrt(r1 @ T2 @ r1)
    dm = R @ (m1 - m2)
    return float(dm @ dm + np.trace(T1) + np.trace(T2) - 2.0 * np.trace(cross))


def gaussian_wa(m1, S1, m2, S2, A: TwistMatrix = IDENTITY) -> float:
    return math.sqrt(max(gaussian_wa_sq(m1, S1, m2, S2, A), 0.0))


def gaussian_map(m_src, S_src, m_dst, S_dst, A: TwistMatrix = IDENTITY) -> tuple[np.ndarray, np.ndarray]:
    """Affine ``W_A``-optimal map ``z -> L z + u`` pushing ``N(m_src, S_src)`` to ``N(m_dst, S_dst)``."""
    R = sqrt_spd(A).matrix
    Ri = np.linalg.inv(R)
    G = R @ np.asarray(S_src, float) @ R
    S = R @ np.asarray(S_dst, float) @ R
    g_half = sym_sqrt(G)
    g_ihalf = np.linalg.inv(g_half)
    Lt = g_ihalf @ sym_sqrt(g_half @ S @ g_half) @ g_ihalf
    L = Ri @ Lt @ R
    u = np.asarray(m_dst, float) - L @ np.asarray(m_src, float)
    return L, u


# ---------------------------------------------------------------- Brenier field


@dataclass
class BrenierField:
    """Barycentric map ``T ~ A^{-1} grad(phi)`` on the source grid and Hessian of ``phi``.

    ``hessian[..., 0:3] = (phi_xx, phi_xv, phi_vv)``; ``support`` marks cells that
    carried source atoms; ``clamped`` marks cells whose ``phi_vv`` or determinant hit
    ``delta_floor`` (the stored Hessian is the floored one).
    """

    grid: PhaseGrid
    A: TwistMatrix
    map_values: np.ndarray
    hessian: np.ndarray
    support: np.ndarray
    clamped: np.ndarray
    regularization: float
    delta_floor: float
    source_weights: np.ndarray  # (nx, nv) cell weights of the source measure (0 off support)
    raw_hessian: np.ndarray | None = None

    @property
    def clamp_fraction(self) -> float:
        """Source mass sitting in clamped cells."""
        return float(self.source_weights[self.clamped].sum())

    def grad_phi(self) -> np.ndarray:
        return apply(self.A, self.map_values)

    def write(self, path: str | Path) -> None:
        g = self.grid
        with open(path, "w") as fh:
            fh.write("# twistot-brenier v1\n")
            fh.write(f"{g.Lx!r} {g.Lv!r} {g.nx} {g.nv} {self.regularization!r}\n")
            fh.write("# Tx Tv hxx hxv hvv clamped  (x-major, nan off support)\n")
            T = np.where(self.support[..., None], self.map_values, np.nan).reshape(-1, 2)
            H = np.where(self.support[..., None], self.hessian, np.nan).reshape(-1, 3)
            c = self.clamped.reshape(-1).astype(int)
            for k in range(T.shape[0]):
                fh.write(f"{T[k, 0]!r} {T[k, 1]!r} {H[k, 0]!r} {H[k, 1]!r} {H[k, 2]!r} {c[k]}\n")


def _fd(vals: np.ndarray, mask: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central differences along ``axis`` on masked cells, one-sided at the mask boundary."""
    v = np.moveaxis(vals, axis, 0)
    m = np.moveaxis(mask, axis, 0)
    out = np.full(v.shape, np.nan)
    fwd = np.zeros_like(m)
    bwd = np.zeros_like(m)
    fwd[:-1] = m[:-1] & m[1:]
    bwd[1:] = m[1:] & m[:-1]
    dplus = np.zeros(v.shape)
    dminus = np.zeros(v.shape)
    dplus[:-1] = (v[1:] - v[:-1]) / h
    dminus[1:] = (v[1:] - v[:-1]) / h
    both = fwd & bwd
    out[both] = 0.5 * (dplus[both] + dminus[both])
    only_f = fwd & ~bwd
    out[only_f] = dplus[only_f]
    only_b = bwd & ~fwd
    out[only_b] = dminus[only_b]
    return np.moveaxis(out, 0, axis)


def hessian_from_gradient(grad: np.ndarray, mask: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """Symmetrized finite-difference Jacobian of a gradient field ``(nx, nv, 2)``."""
    gx, gv = grad[..., 0], grad[..., 1]
    hxx = _fd(gx, mask, grid.dx, 0)
    hvv = _fd(gv, mask, grid.dv, 1)
    hxv = 0.5 * (_fd(gx, mask, grid.dv, 1) + _fd(gv, mask, grid.dx, 0))
    return np.stack([hxx, hxv, hvv], axis=-1)


def _field_from_plan(P, src: DiscreteMeasure, dst: DiscreteMeasure, A, eps, delta_floor) -> BrenierField:
    grid = src.grid
    rows = np.asarray(P.sum(axis=1)).ravel()
    T = np.asarray(P @ dst.atoms) / rows[:, None]
    nx, nv = grid.shape
    map_values = np.zeros((nx * nv, 2))
    map_values[src.cells] = T
    support = np.zeros(nx * nv, dtype=bool)
    support[src.cells] = True
    weights = np.zeros(nx * nv)
    weights[src.cells] = src.weights
    map_values = map_values.reshape(nx, nv, 2)
    support = support.reshape(nx, nv)
    grad = apply(A, map_values)
    H = hessian_from_gradient(grad, support, grid)
    raw = H.copy()
    missing = support & ~np.all(np.isfinite(H), axis=-1)
    H[missing] = (A.a, A.b, A.c)
    det = H[..., 0] * H[..., 2] - H[..., 1] ** 2
    clamped = support & ((H[..., 2] < delta_floor) | (det < delta_floor) | missing)
    H[..., 2] = np.where(support, np.maximum(H[..., 2], delta_floor), H[..., 2])
    return BrenierField(grid, A, map_values, H, support, clamped, eps, delta_floor, weights.reshape(nx, nv), raw)


def brenier_fields(
    f: DensityGrid,
    g: DensityGrid,
    A: TwistMatrix,
    eps_list,
    *,
    mass_floor: float = 1e-6,
    delta_floor: float = 1e-8,
    schedule: float = 0.7,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> list[BrenierField]:
    """Fields for a decreasing list of epsilons, sharing one epsilon-scaling run.

    The map goes from ``g`` (source, where the field lives) toward ``f``.
    """
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    src = from_density(g, mass_floor)
    dst = from_density(f, mass_floor)
    C = cost_matrix(src, dst, A)
    solver = _LogSinkhorn(C, src.weights, dst.weights)
    diam = diameter_sq(src, dst, A)
    out = []
    start = max(diam, eps_list[0])
    for e in eps_list:
        _solve_ladder(solver, eps_schedule(start, e, schedule), tol, max_iter)
        start = e
        P = solver.plan(e)
        out.append(_field_from_plan(P, src, dst, A, e, delta_floor))
        del P
    return out


def brenier_field(f: DensityGrid, g: DensityGrid, A: TwistMatrix, eps: float, **kw) -> BrenierField:
    return brenier_fields(f, g, A, [eps], **kw)[0]
