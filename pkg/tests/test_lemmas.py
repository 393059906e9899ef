import json

import numpy as np
import pytest

from twistot.equilibrium import default_grid, equilibrium_density, gaussian_density
from twistot.errors import HypothesisViolated, InvalidParameter
from twistot.lemmas import (
    SPDSample,
    check_cubic_factorization,
    field_key2_check,
    key1_case_gap,
    key1_classify,
    key1_params,
    key2_cubic,
    key2_equality_m22,
    key2_gap,
    random_spd,
    run_all,
    sweep_diss_identity,
    sweep_key1,
    sweep_key2,
    sweep_key2_equality,
    write_verdicts,
)
from twistot.potential import (
    check_admissibility,
    default_c_scale,
    novoid_candidate,
    quadratic,
)
from twistot.transport import brenier_field, cell_cost
from twistot.twist import theorem_matrix


@pytest.fixture(scope="module")
def pinned():
    U, rep = novoid_candidate(7.995, 1e-4)
    return U, rep, default_c_scale(rep) / 2


def test_spd_sample():
    m = random_spd(3)
    assert m.det > 0 and m.m11 > 0
    assert m.condition_number() >= 1
    with pytest.raises(InvalidParameter):
        SPDSample(1.0, 2.0, 1.0)


def test_key2_gap_examples():
    # M = A itself: both sides vanish
    assert key2_gap(SPDSample(1.5, 0.5, 1.0), 0.5, 1.0) == pytest.approx(0, abs=1e-15)
    assert key2_gap(SPDSample(2.0, 0.3, 1.7), 0.5, 1.0) > 0


def test_key2_equality_locus():
    m22, inside = key2_equality_m22(2.0, 0.7, 0.4, 1.5)
    assert inside
    assert key2_gap(SPDSample(2.0, 0.7, m22), 0.4, 1.5) == pytest.approx(0, abs=1e-13)
    _, outside = key2_equality_m22(1.0, 2.0, 3.0, 0.1)
    assert not outside
    with pytest.raises(InvalidParameter):
        key2_equality_m22(0.0, 1.0, 1.0, 1.0)


def test_cubic_factorization_pointwise():
    x = np.linspace(0.5, 5, 7)
    g, fac = key2_cubic(x, 1.3, 0.4, -0.7, 2.2)
    assert g == pytest.approx(fac, rel=1e-12)


def test_sweeps_pass():
    for v in (sweep_key2(20_000), sweep_key2_equality(20_000), check_cubic_factorization(), sweep_diss_identity(20_000)):
        assert v.passed, v
        assert v.samples > 0


def test_sweeps_are_seeded():
    a, b = sweep_key2(1000, seed=4), sweep_key2(1000, seed=4)
    assert a.min_gap == b.min_gap and a.worst_case_inputs == b.worst_case_inputs
    assert sweep_key2(1000, seed=5).min_gap != a.min_gap


def test_key1_params_guards(pinned):
    U, rep, b = pinned
    p = key1_params(U.alpha, U.psi, b)
    assert p.c == 2 * b
    assert p.A.a == pytest.approx(b + p.c * U.alpha)
    with pytest.raises(HypothesisViolated):
        key1_params(U.alpha, U.psi, 0.5 * rep.b_star)
    U2 = novoid_candidate(1.0, 1.0)[0]
    assert not check_admissibility(U2.alpha, U2.psi).admissible
    with pytest.raises(HypothesisViolated):
        key1_params(U2.alpha, U2.psi, b)


def test_key1_hand_instance(pinned):
    U, _, b = pinned
    p = key1_params(U.alpha, U.psi, b)
    case, gap = key1_case_gap((2.0, 0.0), (0.0, 0.0), U.alpha, U.psi, b)
    assert case == "i"
    assert gap == pytest.approx(4 * U.alpha * b - 8 * b * p.kappa1, rel=1e-12)
    assert gap > 0


def test_key1_classification_covers_cases(pinned):
    U, _, b = pinned
    p = key1_params(U.alpha, U.psi, b)
    z1 = np.array([[3.0, 0.0], [0.2, 0.0], [0.1, 0.5], [0.0, 0.0]])
    z2 = np.array([[0.0, 0.0], [0.0, 0.0], [0.1, 0.0], [0.0, 0.0]])
    cases = key1_classify(z1, z2, p, primed=True)
    assert list(cases[:3]) == [0, 2, 1]


def test_key1_case_i_holds_with_margin(pinned):
    U, _, b = pinned
    v = sweep_key1(U.alpha, U.psi, b, 5000, seed=1)[0]
    assert v.name == "key1_i" and v.passed
    assert v.extra["empirical_constant"] >= v.extra["claimed_constant"]


def test_key1_case_ii_holds_only_in_primed_reading(pinned):
    U, _, b = pinned
    printed = sweep_key1(U.alpha, U.psi, b, 5000, seed=1)[1]
    primed = sweep_key1(U.alpha, U.psi, b, 5000, seed=1, primed=True)[1]
    assert primed.passed
    assert not printed.passed and printed.extra["violations"] > 0


def test_key1_case_iii_constant_not_attained(pinned):
    # the stated kappa3 exceeds the smallest observed lhs / |z1' - z2'|^2 in both readings
    U, _, b = pinned
    for primed in (False, True):
        v = sweep_key1(U.alpha, U.psi, b, 5000, seed=1, primed=primed)[2]
        assert not v.passed
        assert v.extra["empirical_constant"] < v.extra["claimed_constant"]


def test_field_key2_check_on_brenier_field():
    U = quadratic(1.0)
    A = theorem_matrix(1.0, 1.0)
    grid = default_grid(U, 48)
    f = gaussian_density((0.4, -0.2), [[0.9, 0.1], [0.1, 0.8]], grid, n_sigma=5)
    fld = brenier_field(f, equilibrium_density(U, grid), A, 2 * cell_cost(grid, A))
    v = field_key2_check(fld, A)
    assert v.passed and v.samples > 100


def test_run_all_and_write(tmp_path, pinned):
    U, _, b = pinned
    vs = run_all(U.alpha, U.psi, b, n=2000, seed=0)
    names = [v.name for v in vs]
    assert names == ["key2", "key2_equality", "key2_cubic", "diss_identity", "key1_i", "key1_ii", "key1_iii"]
    write_verdicts(tmp_path / "v.json", vs)
    doc = json.loads((tmp_path / "v.json").read_text())
    assert set(doc) == set(names)
    assert "pass" in doc["key2"] and "passed" not in doc["key2"]
