"""Euler-Maruyama particles for the Langevin SDE, with synchronous coupling.

Gaussian increments come from a counter-based stream: the normal used by
particle ``i`` at step ``k`` is a pure function of ``(seed, stream, k, i)``, so any
chunking of the particle range reproduces the serial result bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtri

from .equilibrium import DensityGrid, PhaseGrid
from .errors import InvalidParameter
from .potential import Potential
from .twist import TwistMatrix, norm_sq

log = logging.getLogger(__name__)

_STREAM_INIT_X, _STREAM_INIT_V, _STREAM_NOISE = 1, 2, 3
CHUNK = 1 << 16


def counter_normals(seed: int, stream: int, step: int, start: int, count: int) -> np.ndarray:
    """Standard normals for indices ``start .. start+count-1`` of one (seed, stream, step) cell."""
    q, r = divmod(int(start), 4)
    bg = np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)], counter=[q, int(step), 0, 0])
    raw = bg.random_raw(count + r)[r:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass
class ParticleEnsemble:
    states: np.ndarray  # (n, 2) columns x, v
    seed: int
    time: float

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def mean(self) -> np.ndarray:
        return self.states.mean(axis=0)

    def cov(self) -> np.ndarray:
        return np.cov(self.states, rowvar=False)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# n={self.n} time={self.time!r} seed={self.seed}\n")
            np.savetxt(fh, self.states, fmt="%.17g")

    @classmethod
    def read(cls, path: str | Path) -> "ParticleEnsemble":
        with open(path) as fh:
            head = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
            states = np.loadtxt(fh, ndmin=2)
        if states.shape[0] != int(head["n"]):
            raise InvalidParameter(f"{path}: header n={head['n']} but {states.shape[0]} rows")
        return cls(states, int(head["seed"]), float(head["time"]))


Sampler = Mapping | Callable


def _x_equilibrium_quantile(U: Potential) -> Callable[[np.ndarray], np.ndarray]:
    L = U.R + 12.0 / math.sqrt(U.alpha)
    xs = np.linspace(-L, L, 200001)
    w = np.exp(-(U.value(xs) - U.value(xs).min()))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(xs))])
    cdf /= cdf[-1]
    return lambda u: np.interp(u, cdf, xs)


def sample_initial(U: Potential, init: Sampler, seed: int, start: int, count: int) -> np.ndarray:
    """Initial states for particles ``start .. start+count-1``.

    ``init`` is ``{"kind": "gaussian", "mean": [mx, mv], "cov": [[..], [..]]}``,
    ``{"kind": "equilibrium"}``, ``{"kind": "point", "z": [x, v]}`` or a callable
    mapping two arrays of standard normals to an ``(count, 2)`` array.
    """
    g1 = counter_normals(seed, _STREAM_INIT_X, 0, start, count)
    g2 = counter_normals(seed, _STREAM_INIT_V, 0, start, count)
    if callable(init):
        return np.asarray(init(g1, g2), dtype=float).reshape(count, 2)
    kind = init.get("kind")
    if kind == "gaussian":
        mean = np.asarray(init["mean"], dtype=float)
        chol = np.linalg.cholesky(np.asarray(init["cov"], dtype=float))
        return mean + np.stack([g1, g2], axis=-1) @ chol.T
    if kind == "equilibrium":
        from scipy.special import ndtr

        x = _x_equilibrium_quantile(U)(ndtr(g1))
        return np.stack([x, g2], axis=-1)
    if kind == "point":
        return np.tile(np.asarray(init["z"], dtype=float), (count, 1))
    raise InvalidParameter(f"unknown initial sampler {init!r}")


def _em_chunk(U: Potential, z: np.ndarray, dt: float, n_steps: int, seed: int, start: int, on_step=None) -> np.ndarray:
    x, v = z[:, 0].copy(), z[:, 1].copy()
    sq = math.sqrt(2.0 * dt)
    for k in range(1, n_steps + 1):
        xi = counter_normals(seed, _STREAM_NOISE, k, start, x.size)
        x, v = x + v * dt, v + (-U.d1(x) - v) * dt + sq * xi
        if on_step is not None:
            on_step(k, x, v)
    return np.stack([x, v], axis=-1)


def _n_steps(dt: float, t_end: float) -> int:
    if not dt > 0:
        raise InvalidParameter("dt must be positive")
    if t_end < 0:
        raise InvalidParameter("t_end must be nonnegative")
    return int(round(t_end / dt))


def simulate(U: Potential, n: int, dt: float, t_end: float, seed: int, init: Sampler, *, chunk: int = CHUNK) -> ParticleEnsemble:
    """Euler-Maruyama: ``X += V dt``, ``V += (-U'(X) - V) dt + sqrt(2 dt) N(0, 1)`` (old values)."""
    if n < 1:
        raise InvalidParameter("need at least one particle")
    steps = _n_steps(dt, t_end)
    out = np.empty((n, 2))
    for start in range(0, n, chunk):
        cnt = min(chunk, n - start)
        z0 = sample_initial(U, init, seed, start, cnt)
        out[start : start + cnt] = _em_chunk(U, z0, dt, steps, seed, start)
    return ParticleEnsemble(out, seed, steps * dt)


def synchronous_pair(
    U: Potential,
    n: int,
    dt: float,
    t_end: float,
    seed: int,
    init_f: Sampler,
    init_g: Sampler,
    A: TwistMatrix,
    record_every: int = 1,
) -> tuple[ParticleEnsemble, ParticleEnsemble, list[tuple[float, float]]]:
    """Two ensembles driven by identical Brownian increments.

    Both initial laws are built from the same underlying normals, so identical
    samplers give identical ensembles. Returns ``(1/n) sum |z_f - z_g|_A^2`` at
    ``t = 0`` and every ``record_every`` steps.
    """
    steps = _n_steps(dt, t_end)
    zf = sample_initial(U, init_f, seed, 0, n)
    zg = sample_initial(U, init_g, seed, 0, n)
    series = [(0.0, float(np.mean(norm_sq(A, zf - zg))))]
    xf, vf = zf[:, 0].copy(), zf[:, 1].copy()
    xg, vg = zg[:, 0].copy(), zg[:, 1].copy()
    sq = math.sqrt(2.0 * dt)
    for k in range(1, steps + 1):
        xi = counter_normals(seed, _STREAM_NOISE, k, 0, n)
        xf, vf = xf + vf * dt, vf + (-U.d1(xf) - vf) * dt + sq * xi
        xg, vg = xg + vg * dt, vg + (-U.d1(xg) - vg) * dt + sq * xi
        if k % record_every == 0 or k == steps:
            d = np.stack([xf - xg, vf - vg], axis=-1)
            series.append((k * dt, float(np.mean(norm_sq(A, d)))))
    t = steps * dt
    ef = ParticleEnsemble(np.stack([xf, vf], axis=-1), seed, t)
    eg = ParticleEnsemble(np.stack([xg, vg], axis=-1), seed, t)
    return ef, eg, series


def write_paired_series(path: str | Path, series) -> None:
    with open(path, "w") as fh:
        fh.write("t,msd_A\n")
        for t, d in series:
            fh.write(f"{t!r},{d!r}\n")


def bin_particles(e: ParticleEnsemble, grid: PhaseGrid) -> tuple[DensityGrid, float]:
    """Normalized histogram on the grid cells and the fraction of particles outside it."""
    xe = np.linspace(-grid.Lx, grid.Lx, grid.nx + 1)
    ve = np.linspace(-grid.Lv, grid.Lv, grid.nv + 1)
    H, _, _ = np.histogram2d(e.states[:, 0], e.states[:, 1], bins=[xe, ve])
    inside = H.sum()
    outside = 1.0 - inside / e.n
    if outside > 0:
        log.info("empirical density: %.3e of particles outside the grid", outside)
    if inside == 0:
        raise InvalidParameter(f"no particle inside the grid (outside fraction {outside:.3f})")
    return DensityGrid(grid, H / (inside * grid.cell_area)), float(outside)


def empirical_density(e: ParticleEnsemble, grid: PhaseGrid) -> DensityGrid:
    return bin_particles(e, grid)[0]
