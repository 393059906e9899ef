import csv
import json
import math

import numpy as np
import pytest

from twistot.dissipation import (
    DECAY_COLUMNS,
    diss_identity_sides,
    equilibrium_cov,
    fit_decay_rate,
    gaussian_j_monte_carlo,
    gaussian_j_oracle,
    gaussian_j_terms,
    gaussian_wa_sq_to_equilibrium,
    j_functional,
    j_functional_ladder,
    monotone_nonincreasing,
    richardson,
    term2_integrand,
    theorem_kappa,
    verify_dissipation,
    verify_key_inequality,
    write_decay_csv,
    write_json,
)
from twistot.equilibrium import (
    PhaseGrid,
    default_grid,
    equilibrium_density,
    gaussian_density,
)
from twistot.errors import DegenerateInput, FieldMismatch, InvalidParameter
from twistot.kfp import SolverConfig, cfl_dt, evolve, ou_moments
from twistot.potential import novoid_candidate, quadratic
from twistot.transport import brenier_field, cell_cost
from twistot.twist import make_twist, theorem_matrix

ALPHA = 1.0
A = theorem_matrix(ALPHA, 1.0)
U = quadratic(ALPHA)


def test_identity_sanity_instance():
    lhs, rhs, printed = diss_identity_sides(2.0, 1.0, 3.0, 1.0, 2.0)
    assert lhs == pytest.approx(0.4, abs=1e-14)
    assert rhs == pytest.approx(0.4, abs=1e-14)
    # the variant with -c inside the 1/det bracket is off
    assert abs(printed - 0.4) > 0.1


def test_term2_integrand_nonnegative_and_zero_at_theorem_hessian():
    rng = np.random.default_rng(0)
    G = rng.uniform(-2, 2, size=(1000, 2, 2))
    H = np.einsum("nki,nkj->nij", G, G) + 1e-3 * np.eye(2)
    b, c = rng.uniform(-3, 3, size=(2, 1000))
    assert np.all(term2_integrand(H[:, 0, 0], H[:, 0, 1], H[:, 1, 1], b, c) >= 0)
    # the identity map has Hessian A, where term2 vanishes
    assert term2_integrand(A.a, A.b, A.c, A.b, A.c) == pytest.approx(0, abs=1e-15)


def test_gaussian_oracle_zero_at_equilibrium():
    t1, t2 = gaussian_j_terms(np.zeros(2), equilibrium_cov(ALPHA), ALPHA, A)
    assert t1 == pytest.approx(0, abs=1e-14)
    assert t2 == pytest.approx(0, abs=1e-14)
    with pytest.raises(InvalidParameter):
        gaussian_j_terms(np.zeros(2), [[1, 2], [2, 1]], ALPHA, A)


def test_gaussian_oracle_against_monte_carlo():
    m, S = np.array([0.6, -0.3]), np.array([[0.7, 0.2], [0.2, 1.4]])
    mc, se = gaussian_j_monte_carlo(m, S, ALPHA, A, n=400_000, seed=3)
    assert gaussian_j_oracle(m, S, ALPHA, A) == pytest.approx(mc, abs=4 * se)


@pytest.mark.parametrize("alpha,cs", [(1.0, 1.0), (2.0, 0.5)])
def test_dissipation_is_tight_along_gaussian_flow(alpha, cs):
    A_ = theorem_matrix(alpha, cs)
    m0, S0 = np.array([1.0, -0.5]), np.array([[0.5, 0.1], [0.1, 0.7]])

    def half(t):
        m, S = ou_moments(alpha, m0, S0, t)
        return 0.5 * gaussian_wa_sq_to_equilibrium(m, S, alpha, A_)

    h = 1e-4
    for t in (0.5, 1.0, 2.0):
        m, S = ou_moments(alpha, m0, S0, t)
        d = (half(t + h) - half(t - h)) / (2 * h)
        assert d == pytest.approx(-gaussian_j_oracle(m, S, alpha, A_), rel=1e-6)


def test_richardson_exact_on_polynomials():
    eps = [4.0, 2.0, 1.0]
    assert richardson(eps, [3 + 2 * e for e in eps]) == pytest.approx(3)
    assert richardson(eps, [3 + 2 * e - e * e for e in eps]) == pytest.approx(3)
    assert richardson([1.0], [5.0]) == 5.0


def test_numeric_j_matches_oracle_on_64_grid():
    grid = default_grid(U, 64)
    m, S = np.array([0.4, -0.2]), np.array([[0.8, 0.1], [0.1, 0.9]])
    f = gaussian_density(m, S, grid, n_sigma=5)
    rep = j_functional_ladder(f, equilibrium_density(U, grid), A, U)
    ref = gaussian_j_oracle(m, S, ALPHA, A)
    assert rep.j_extrapolated == pytest.approx(ref, rel=0.1)
    # extrapolation improves on the finest raw value
    assert abs(rep.j_extrapolated - ref) < abs(rep.j_raw - ref)
    assert rep.wa_sq == pytest.approx(gaussian_wa_sq_to_equilibrium(m, S, ALPHA, A), rel=0.05)
    assert len(rep.eps_ladder) == 3
    assert rep.clamp_fraction == 0


def test_single_field_estimator_and_grid_mismatch():
    grid = default_grid(U, 48)
    sig = equilibrium_density(U, grid)
    f = gaussian_density((0.5, 0), [[0.8, 0], [0, 0.8]], grid, n_sigma=5)
    fld = brenier_field(f, sig, A, 2 * cell_cost(grid, A))
    rep = j_functional(f, sig, A, U, fld)
    assert rep.j_total == pytest.approx(rep.term1 + rep.term2)
    assert rep.ratio == pytest.approx(rep.j_total / rep.wa_sq)
    other = equilibrium_density(U, default_grid(U, 32))
    with pytest.raises(FieldMismatch):
        j_functional(f, other, A, U, fld)


def test_key_inequality_closed_form_and_vacuous():
    kc = verify_key_inequality((np.array([0.5, -0.3]), np.array([[0.8, 0.1], [0.1, 1.3]])), A, U)
    assert kc.passed and not kc.vacuous
    assert kc.kappa_required == pytest.approx(theorem_kappa(U, A).kappa)
    assert kc.ratio >= kc.kappa_required
    eq = verify_key_inequality((np.zeros(2), equilibrium_cov(ALPHA)), A, U)
    assert eq.vacuous and eq.passed and eq.ratio is None
    with pytest.raises(InvalidParameter):
        theorem_kappa(U, make_twist(2.0, 0.5, 1.5))
    with pytest.raises(InvalidParameter):
        verify_key_inequality(gaussian_density((0, 0), np.eye(2), default_grid(U, 32)), A, U)


def test_key_inequality_numeric_on_perturbed_density():
    grid = default_grid(U, 64)
    sig = equilibrium_density(U, grid)
    X, V = grid.mesh()
    f = type(sig)(grid, sig.values * (1 + 0.5 * np.sin(0.8 * X + 1.1 * V + 0.3)))
    kc = verify_key_inequality(f, A, U, sigma=sig)
    assert kc.passed
    assert kc.report is not None and kc.report.clamp_fraction < 1e-3
    assert "report" in kc.to_dict()


def test_verify_dissipation_oracle_on_short_run():
    grid = default_grid(U, 64)
    f0 = gaussian_density((1.0, 0.0), [[0.6, 0.0], [0.0, 0.6]], grid, n_sigma=5)
    ts = tuple(np.arange(0, 1.01, 0.25))
    traj = evolve(f0, U, SolverConfig(cfl_dt(grid, U), 1.0, ts))
    checks = verify_dissipation(traj, A, U, equilibrium_density(U, grid), distance="gaussian")
    assert len(checks) == len(ts) - 2
    assert all(c.passed for c in checks)
    for c in checks:
        assert c.tol_eps == 0
        assert c.dominant in ("time", "ot", "eps")
    with pytest.raises(InvalidParameter):
        verify_dissipation(traj, A, U, equilibrium_density(U, grid), rhs="magic", distance="gaussian")
    with pytest.raises(InvalidParameter):
        verify_dissipation(traj, A, U, equilibrium_density(U, grid), distance="magic")


def test_verify_dissipation_input_guards():
    grid = default_grid(U, 32)
    f0 = gaussian_density((1.0, 0.0), np.eye(2) * 0.6, grid, n_sigma=5)
    traj = evolve(f0, U, SolverConfig(cfl_dt(grid, U), 0.1, (0.0, 0.1)))
    with pytest.raises(DegenerateInput):
        verify_dissipation(traj, A, U, equilibrium_density(U, grid))
    Un, _ = novoid_candidate(7.995, 1e-4)
    g2 = PhaseGrid(default_grid(Un, 32).Lx, 8.0, 32, 32)
    f1 = equilibrium_density(Un, g2)
    tr2 = evolve(f1, Un, SolverConfig(cfl_dt(g2, Un), 0.2, (0.0, 0.1, 0.2)))
    with pytest.raises(InvalidParameter):
        verify_dissipation(tr2, A, Un, f1)


def test_fit_decay_rate_recovers_exponential():
    t = np.linspace(1, 10, 19)
    fit = fit_decay_rate(t, 3.0 * np.exp(-0.37 * t))
    assert fit.kappa_observed == pytest.approx(0.37)
    assert fit.r_squared == pytest.approx(1.0)
    assert math.exp(fit.intercept) == pytest.approx(3.0)
    with pytest.raises(DegenerateInput):
        fit_decay_rate(t[:4], np.ones(4))
    with pytest.raises(DegenerateInput):
        fit_decay_rate(t, np.where(t > 5, 0.0, 1.0))
    with pytest.raises(DegenerateInput):
        fit_decay_rate(t[::-1], np.exp(-t))


def test_monotone_with_tolerance():
    assert monotone_nonincreasing([3, 2, 2, 1], 0.0)
    assert not monotone_nonincreasing([3, 2, 2.1, 1], 0.0)
    assert monotone_nonincreasing([3, 2, 2.1, 1], 0.2)


def test_writers(tmp_path):
    p = tmp_path / "decay.csv"
    write_decay_csv(p, [{"t": 0.0, "W_A": 1.0, "mass": 1.0}, {"t": 0.5, "W_A": 0.8}])
    rows = list(csv.DictReader(p.open()))
    assert tuple(rows[0]) == DECAY_COLUMNS
    assert rows[1]["W_A"] == "0.8" and rows[1]["mass"] == ""
    q = tmp_path / "x.json"
    write_json(q, {"a": np.arange(3), "b": np.float64(0.5), "c": fit_decay_rate(np.arange(1, 6), np.exp(-np.arange(1, 6)))})
    doc = json.loads(q.read_text())
    assert doc["a"] == [0, 1, 2] and doc["b"] == 0.5 and doc["c"]["kappa_observed"] == pytest.approx(1.0)
