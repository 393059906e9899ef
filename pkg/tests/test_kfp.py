import json

import numpy as np
import pytest

from twistot.equilibrium import (
    PhaseGrid,
    default_grid,
    equilibrium_density,
    gaussian_density,
    moments,
    relative_entropy,
)
from twistot.errors import CFLViolation, InvalidParameter
from twistot.kfp import (
    SolverConfig,
    cfl_dt,
    evolve,
    ou_contraction_rate,
    ou_moments,
    stationarity_residual,
    step,
)
from twistot.potential import Novoid, Potential, quadratic

U1 = quadratic(1.0)
M0 = np.array([0.5, -0.3])
S0 = np.array([[0.8, 0.1], [0.1, 1.2]])


@pytest.fixture(scope="module")
def grid64():
    return default_grid(U1, 64)


def test_cfl_monotone():
    g = default_grid(U1, 64)
    wide = PhaseGrid(g.Lx, 2 * g.Lv, g.nx, 2 * g.nv)  # same dv, larger speeds
    assert 0 < cfl_dt(wide, U1) < cfl_dt(g, U1)
    fine = PhaseGrid(g.Lx, g.Lv, 4 * g.nx, g.nv)
    assert fine.dx / fine.Lv == pytest.approx(0.25 * g.dx / g.Lv)
    assert cfl_dt(fine, U1) <= 0.5 * fine.dx / fine.Lv


def test_step_trivial_cases(grid64):
    f = gaussian_density(M0, S0, grid64)
    assert step(f, U1, 0.0) is f
    with pytest.raises(InvalidParameter):
        step(f, U1, -1.0)
    with pytest.raises(CFLViolation):
        step(f, U1, 10 * cfl_dt(grid64, U1))


def test_config_validation():
    with pytest.raises(InvalidParameter):
        SolverConfig(0.0, 1.0)
    with pytest.raises(InvalidParameter):
        SolverConfig(0.1, 1.0, (0.5, 0.2))
    with pytest.raises(InvalidParameter):
        SolverConfig(0.1, 1.0, (0.0, 2.0))
    with pytest.raises(InvalidParameter):
        SolverConfig(0.1, 1.0, splitting="yoshida")


def test_evolve_t_end_zero(grid64):
    f = gaussian_density(M0, S0, grid64)
    tr = evolve(f, U1, SolverConfig(0.001, 0.0))
    assert tr.times == [0.0]
    assert np.array_equal(tr.snapshots[0].values, f.values)


def test_ou_moments_limits():
    m, S = ou_moments(2.0, M0, S0, 0.0)
    assert np.allclose(m, M0) and np.allclose(S, S0)
    rate = ou_contraction_rate(2.0)
    m, S = ou_moments(2.0, M0, S0, 50.0 / rate)
    assert np.allclose(m, 0, atol=1e-12)
    assert np.allclose(S, np.diag([0.5, 1.0]), atol=1e-10)


def test_ou_mean_matches_exponential():
    from scipy.linalg import expm

    M = np.array([[0, 1], [-1.0, -1]])
    m, _ = ou_moments(1.0, M0, S0, 1.3)
    assert np.allclose(m, expm(M * 1.3) @ M0, rtol=1e-12)


def test_gaussian_run_matches_ou(grid64):
    g = default_grid(U1, 128)
    tr = evolve(gaussian_density(M0, S0, g), U1, SolverConfig(cfl_dt(g, U1), 1.0, (0.0, 0.5, 1.0)))
    me, Se = ou_moments(1.0, M0, S0, 1.0)
    m, S = moments(tr.snapshots[-1])
    assert np.allclose(m, me, rtol=0.01, atol=1e-3 * np.abs(me).max())
    assert np.allclose(S, Se, rtol=0.01)
    assert tr.times == [0.0, 0.5, 1.0]


def test_positivity_mass_and_entropy_decay(grid64):
    U = Potential(0.5, Novoid(0.05))
    g = default_grid(U, 64)
    tr = evolve(gaussian_density((1.0, 0.5), [[0.3, 0.0], [0.0, 0.5]], g, n_sigma=5), U, SolverConfig(cfl_dt(g, U), 3.0, tuple(np.arange(0, 3.01, 0.25))))
    finf = equilibrium_density(U, g)
    assert all(np.all(f.values >= 0) for f in tr.snapshots)
    assert abs(tr.total_leakage) < 1e-8
    assert tr.max_step_mass_error < 1e-12
    H = [relative_entropy(f, finf) for f in tr.snapshots]
    assert np.all(np.diff(H) <= 1e-10)


def _self_convergence(splitting):
    g = default_grid(U1, 64)
    f0 = gaussian_density(M0, S0, g)
    c = cfl_dt(g, U1)
    ref = evolve(f0, U1, SolverConfig(c / 32, 1.0, (0, 1.0), splitting)).snapshots[-1].values
    errs = []
    for k in (1, 2, 4):
        f = evolve(f0, U1, SolverConfig(c / k, 1.0, (0, 1.0), splitting)).snapshots[-1].values
        errs.append(np.abs(f - ref).sum() * g.cell_area)
    return np.log2(np.array(errs[:-1]) / np.array(errs[1:]))


def test_strang_second_order_in_time():
    slopes = _self_convergence("strang")
    assert np.all((slopes >= 1.7) & (slopes <= 2.3)), slopes


def test_lie_first_order_in_time():
    slopes = _self_convergence("lie")
    assert np.all((slopes >= 0.8) & (slopes <= 1.2)), slopes


def test_stationarity_residual_converges():
    r64 = stationarity_residual(U1, default_grid(U1, 64))
    r128 = stationarity_residual(U1, default_grid(U1, 128))
    assert r64 / r128 >= 1.8


@pytest.mark.xfail(strict=True, reason="the discrete f_inf is a fixed point only up to O(h^2); measured 1.4e-6 on 128^2 (see ledger)")
def test_stationary_step_absolute_bound():
    g = default_grid(U1, 128)
    finf = equilibrium_density(U1, g)
    out = step(finf, U1, cfl_dt(g, U1))
    assert np.abs(out.values - finf.values).max() <= 1e-6


def test_stationary_run_stays_close():
    g = default_grid(U1, 64)
    finf = equilibrium_density(U1, g)
    tr = evolve(finf, U1, SolverConfig(cfl_dt(g, U1), 2.0, (0.0, 1.0, 2.0)))
    drift = [np.abs(f.values - finf.values).max() / finf.values.max() for f in tr.snapshots]
    assert drift[0] == 0
    # relaxes to the discrete steady state at O(h^2) distance from the sampled f_inf
    assert max(drift) < 0.02


def test_trajectory_write(tmp_path, grid64):
    tr = evolve(gaussian_density(M0, S0, grid64), U1, SolverConfig(cfl_dt(grid64, U1), 0.1, (0.0, 0.1)))
    tr.write(tmp_path)
    meta = json.loads((tmp_path / "snapshot_run.json").read_text())
    assert meta["times"] == [0.0, 0.1]
    assert (tmp_path / "snapshot_0001.dens").exists()
