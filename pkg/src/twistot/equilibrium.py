"""Phase-space grids, grid densities, the stationary density and entropy/moment diagnostics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainTooSmall, InvalidParameter, NoConvergence, SupportMismatch
from .potential import Potential
from .twist import Vec2

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "# twistot-density v1"


@dataclass(frozen=True)
class PhaseGrid:
    """Uniform cell-centered grid on ``[-Lx, Lx] x [-Lv, Lv]``."""

    Lx: float
    Lv: float
    nx: int
    nv: int

    def __post_init__(self):
        if not (self.Lx > 0 and self.Lv > 0):
            raise InvalidParameter("half-widths must be positive")
        if self.nx < 4 or self.nv < 4:
            raise InvalidParameter("need at least 4 cells per direction")

    @property
    def dx(self) -> float:
        return 2.0 * self.Lx / self.nx

    @property
    def dv(self) -> float:
        return 2.0 * self.Lv / self.nv

    @property
    def cell_area(self) -> float:
        return self.dx * self.dv

    @property
    def x(self) -> np.ndarray:
        return -self.Lx + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def v(self) -> np.ndarray:
        return -self.Lv + (np.arange(self.nv) + 0.5) * self.dv

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nv)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.v, indexing="ij")

    def centers(self) -> np.ndarray:
        X, V = self.mesh()
        return np.stack([X.ravel(), V.ravel()], axis=-1)

    def refined(self, factor: int = 2) -> "PhaseGrid":
        return PhaseGrid(self.Lx, self.Lv, self.nx * factor, self.nv * factor)

    def to_dict(self) -> dict:
        return {"Lx": self.Lx, "Lv": self.Lv, "nx": self.nx, "nv": self.nv}


def default_grid(U: Potential, n: int = 128, Lv: float = 8.0) -> PhaseGrid:
    # 8 standard deviations of the quadratic part beyond the support: tails < 1e-12
    return PhaseGrid(U.R + 8.0 / math.sqrt(U.alpha), Lv, n, n)


class DensityGrid:
    """Nonnegative density (mass per unit area) on a :class:`PhaseGrid`, normalized to unit mass."""

    __slots__ = ("grid", "values", "raw_mass")

    def __init__(self, grid: PhaseGrid, values, *, normalize: bool = True):
        vals = np.array(values, dtype=float, copy=True)
        if vals.shape != grid.shape:
            raise InvalidParameter(f"values shape {vals.shape} != grid shape {grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidParameter("density has non-finite values")
        if np.any(vals < 0):
            raise InvalidParameter(f"density has negative values (min {vals.min():g})")
        mass = float(vals.sum() * grid.cell_area)
        if not mass > 0:
            raise InvalidParameter("density has zero mass")
        if normalize and mass != 1.0:
            if abs(mass - 1.0) > 1e-12:
                log.debug("renormalizing density: raw mass deviation %.3e", mass - 1.0)
            vals /= mass
        vals.flags.writeable = False
        self.grid = grid
        self.values = vals
        self.raw_mass = mass

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)

    def cell_masses(self) -> np.ndarray:
        return self.values * self.grid.cell_area

    def __repr__(self) -> str:
        return f"DensityGrid({self.grid}, mass={self.mass:.12g})"


def _simpson(fn, lo: float, hi: float, n: int) -> float:
    x = np.linspace(lo, hi, n + 1)
    y = fn(x)
    h = (hi - lo) / n
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def partition_z(U: Potential, tol: float = 1e-10) -> float:
    """``Z = sqrt(2 pi) * int exp(-U)``, composite Simpson with doubling.

    The window is cut where the integrand falls below 1e-16 of its maximum; the
    pieces inside and outside the perturbation support are integrated separately
    so the kinks of ``psi''`` at ``+-R`` sit on panel boundaries.
    """
    if not tol > 0:
        raise InvalidParameter("tol must be positive")
    xs = np.linspace(-U.R, U.R, 4097)
    u_min = float(np.min(U.value(xs)))
    u_min = min(u_min, 0.0)
    pmax = float(np.max(np.abs(U.psi.value(xs))))
    # exp(-U) <= exp(-alpha x^2 / 2 + |psi|_inf); cut at 1e-16 of the max
    L = U.R + math.sqrt(2.0 * (math.log(1e16) + pmax - u_min + pmax) / U.alpha)
    fn = lambda x: np.exp(-(U.value(x) - u_min))  # noqa: E731
    pieces = [(-L, -U.R), (-U.R, U.R), (U.R, L)]
    total = 0.0
    for lo, hi in pieces:
        n = 64
        prev = _simpson(fn, lo, hi, n)
        for _ in range(24):
            n *= 2
            cur = _simpson(fn, lo, hi, n)
            err = abs(cur - prev) / 15.0
            if err <= tol * 0.25 * max(abs(cur), 1e-300) or cur == prev:
                break
            prev = cur
        else:
            raise NoConvergence("Z quadrature did not reach tolerance")
        total += cur + (cur - prev) / 15.0
    return math.sqrt(2.0 * math.pi) * total * math.exp(-u_min)


def equilibrium_values(U: Potential, grid: PhaseGrid) -> np.ndarray:
    X, V = grid.mesh()
    logf = -U.value(X) - 0.5 * V * V
    return np.exp(logf - logf.max())


def equilibrium_density(U: Potential, grid: PhaseGrid, *, check_boundary: bool = True) -> DensityGrid:
    """Cell-center samples of ``exp(-U(x) - v^2/2)``, renormalized by midpoint quadrature."""
    vals = equilibrium_values(U, grid)
    if check_boundary:
        edge = max(vals[0].max(), vals[-1].max(), vals[:, 0].max(), vals[:, -1].max())
        if edge >= 1e-12 * vals.max():
            raise DomainTooSmall(f"boundary density ratio {edge / vals.max():.2e} >= 1e-12; enlarge the grid")
    return DensityGrid(grid, vals)


def shifted_equilibrium(U: Potential, grid: PhaseGrid, shift) -> DensityGrid:
    """Equilibrium translated by ``shift`` in phase space (an off-equilibrium start)."""
    X, V = grid.mesh()
    sx, sv = float(shift[0]), float(shift[1])
    logf = -U.value(X - sx) - 0.5 * (V - sv) ** 2
    return DensityGrid(grid, np.exp(logf - logf.max()))


def moments(f: DensityGrid) -> tuple[Vec2, np.ndarray]:
    w = f.cell_masses()
    w = w / w.sum()
    X, V = f.grid.mesh()
    mx = float((w * X).sum())
    mv = float((w * V).sum())
    dx, dvv = X - mx, V - mv
    cxx = float((w * dx * dx).sum())
    cxv = float((w * dx * dvv).sum())
    cvv = float((w * dvv * dvv).sum())
    return Vec2(mx, mv), np.array([[cxx, cxv], [cxv, cvv]])


def gaussian_values(mean, cov, grid: PhaseGrid) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    prec = np.linalg.inv(cov)
    X, V = grid.mesh()
    dx, dv = X - mean[0], V - mean[1]
    q = prec[0, 0] * dx * dx + 2.0 * prec[0, 1] * dx * dv + prec[1, 1] * dv * dv
    return np.exp(-0.5 * q)


def gaussian_density(mean, cov, grid: PhaseGrid, *, n_sigma: float = 6.0) -> DensityGrid:
    """Discretized ``N(mean, cov)``; the grid must cover ``n_sigma`` standard deviations."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if not (cov[0, 0] > 0 and np.linalg.det(cov) > 0):
        raise InvalidParameter("covariance must be SPD")
    sx, sv = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    if abs(mean[0]) + n_sigma * sx > grid.Lx or abs(mean[1]) + n_sigma * sv > grid.Lv:
        raise DomainTooSmall(f"grid does not cover {n_sigma} standard deviations")
    return DensityGrid(grid, gaussian_values(mean, cov, grid))


def relative_entropy(f: DensityGrid, g: DensityGrid) -> float:
    """``sum f ln(f / g) dx dv`` with ``0 ln 0 = 0``."""
    if f.grid != g.grid:
        raise SupportMismatch("densities live on different grids")
    fv, gv = f.values, g.values
    pos = fv > 0
    if np.any(gv[pos] <= 0):
        raise SupportMismatch("g vanishes where f is positive")
    h = float(np.sum(fv[pos] * np.log(fv[pos] / gv[pos])) * f.grid.cell_area)
    return h


def gaussian_kl(m1, S1, m2, S2) -> float:
    """Closed-form ``KL(N(m1, S1) | N(m2, S2))`` in two dimensions."""
    m1, m2 = np.asarray(m1, float), np.asarray(m2, float)
    S1, S2 = np.asarray(S1, float), np.asarray(S2, float)
    P2 = np.linalg.inv(S2)
    d = m2 - m1
    return 0.5 * (np.trace(P2 @ S1) + d @ P2 @ d - 2.0 + math.log(np.linalg.det(S2) / np.linalg.det(S1)))


def write_snapshot(path: str | Path, f: DensityGrid, time: float = 0.0) -> None:
    """Text snapshot: magic line, ``Lx Lv nx nv time``, then ``nx*nv`` values in x-major order."""
    g = f.grid
    with open(path, "w") as fh:
        fh.write(SNAPSHOT_MAGIC + "\n")
        fh.write(f"{g.Lx!r} {g.Lv!r} {g.nx} {g.nv} {float(time)!r}\n")
        np.savetxt(fh, f.values.reshape(-1), fmt="%.17g")


def read_snapshot(path: str | Path) -> tuple[DensityGrid, float]:
    with open(path) as fh:
        magic = fh.readline().rstrip("\n")
        if magic != SNAPSHOT_MAGIC:
            raise InvalidParameter(f"{path}: not a density snapshot (header {magic!r})")
        Lx, Lv, nx, nv, t = fh.readline().split()
        grid = PhaseGrid(float(Lx), float(Lv), int(nx), int(nv))
        vals = np.loadtxt(fh, dtype=float, ndmin=1)
    if vals.size != grid.nx * grid.nv:
        raise InvalidParameter(f"{path}: expected {grid.nx * grid.nv} values, found {vals.size}")
    return DensityGrid(grid, vals.reshape(grid.shape), normalize=False), float(t)
