import csv
import json
import math
import shutil
import subprocess

import numpy as np
import pytest

from twistot import cli
from twistot.cli import (
    ConfigError,
    load_config,
    main,
    oracle_instance,
    required_kappa,
    snapshot_times,
)
from twistot.potential import quadratic
from twistot.transport import gaussian_wa
from twistot.twist import IDENTITY, theorem_matrix

QUAD = {"schema": 1, "potential": {"alpha": 1.0, "perturbation": "none"}, "matrix": {"c_scale": 1.0}, "grid": {"nx": 32}}


def _cfg(tmp_path, name="c.json", **sections):
    doc = json.loads(json.dumps(QUAD))
    for k, v in sections.items():
        doc[k] = {**doc.get(k, {}), **v} if isinstance(v, dict) else v
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def _run(cmd, cfg, out, *extra):
    return main([cmd, "--config", str(cfg), "--out", str(out), *extra])


def test_defaults_and_snapshot_times():
    cfg = load_config(None)
    assert cfg.grid.nx == 128 and cfg.solver.splitting == "strang"
    U, info = cli.build_potential(cfg.potential)
    assert info["a_param"] == cli.PINNED_A_PARAM
    assert U.alpha == pytest.approx(7.995e-4)
    assert snapshot_times(1.0, 0.25) == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert snapshot_times(0.0, 0.5) == (0.0,)
    assert snapshot_times(1.1, 0.5)[-1] == 1.1


@pytest.mark.parametrize(
    "doc",
    [
        {"schema": 1, "potential": {"alpha": 1.0, "bogus": 1}},
        {"schema": 2},
        {"schema": 1, "grid": {"nx": "many"}},
        {"schema": 1, "potential": {"perturbation": "wiggly"}},
        {"schema": 1, "potential": {"perturbation": "none"}},
        {"schema": 1, "potential": {"alpha": 1.0, "a_param": 7.0}},
        {"schema": 1, "ot": {"coarsen": [1]}},
        {"schema": 1, "solver": {"snapshot_every": 0}},
    ],
)
def test_bad_configs_exit_2(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(p)
    assert _run("admissibility", p, tmp_path / "o") == 2


def test_malformed_json_and_bad_jobs(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"schema": 1,')
    assert _run("admissibility", p, tmp_path / "o") == 2
    assert _run("admissibility", _cfg(tmp_path), tmp_path / "o", "--jobs", "0") == 2


def test_admissibility_exit_codes(tmp_path):
    ok = tmp_path / "ok.json"
    ok.write_text(json.dumps({"schema": 1, "potential": {"search": True}}))
    assert _run("admissibility", ok, tmp_path / "ok") == 0
    doc = json.loads((tmp_path / "ok" / "admissibility.json").read_text())
    assert doc["report"]["admissible"] is True
    assert doc["report"]["c_star"] > 2 * doc["report"]["b_star"]
    assert doc["potential"]["searched"] is True
    bad = _cfg(tmp_path, "bad.json", potential={"perturbation": "novoid", "scale": 1.0})  # alpha = 1, Novoid(1)
    assert _run("admissibility", bad, tmp_path / "bad") == 1
    assert json.loads((tmp_path / "bad" / "admissibility.json").read_text())["report"]["admissible"] is False
    run = json.loads((tmp_path / "bad" / "admissibility_run.json").read_text())
    assert run["exit_code"] == 1 and run["wall_seconds"] >= 0


def test_theorem_matrix_needs_admissible_window(tmp_path):
    p = _cfg(tmp_path, potential={"perturbation": "novoid", "scale": 1.0}, matrix={"c_scale": None})
    assert _run("decay", p, tmp_path / "o") == 2


def test_required_kappa_sources():
    U = quadratic(1.0)
    A = theorem_matrix(1.0, 1.0)
    k, src = required_kappa(U, A, None)
    assert k == pytest.approx(0.1381966011250105)
    assert src
    assert required_kappa(U, A, 0.01) == (0.01, "config")
    assert required_kappa(U, IDENTITY, None)[0] is None


def test_decay_t_end_zero_single_row(tmp_path):
    p = _cfg(tmp_path, solver={"t_end": 0.0})
    assert _run("decay", p, tmp_path / "o") == 0
    rows = list(csv.DictReader((tmp_path / "o" / "decay.csv").open()))
    assert len(rows) == 1 and float(rows[0]["t"]) == 0.0
    fit = json.loads((tmp_path / "o" / "decay_fit.json").read_text())
    assert fit["pass"] is None and "note" in fit
    assert (tmp_path / "o" / "decay.png").stat().st_size > 0


def test_decay_short_run_columns_and_j_every(tmp_path):
    p = _cfg(tmp_path, solver={"t_end": 1.0, "snapshot_every": 0.25}, ot={"j_every": 2}, fit={"t_min": 0.0})
    code = _run("decay", p, tmp_path / "o")
    rows = list(csv.DictReader((tmp_path / "o" / "decay.csv").open()))
    assert [float(r["t"]) for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert tuple(rows[0]) == ("t", "W_A", "W_2", "J_A_raw", "J_A_extrapolated", "H_rel_entropy", "mass")
    assert math.isnan(float(rows[1]["J_A_raw"])) and not math.isnan(float(rows[2]["J_A_raw"]))
    wa = [float(r["W_A"]) for r in rows]
    assert all(b < a for a, b in zip(wa, wa[1:]))
    assert all(abs(float(r["mass"]) - 1) < 1e-8 for r in rows)
    fit = json.loads((tmp_path / "o" / "decay_fit.json").read_text())
    assert code == (0 if fit["pass"] else 1)
    assert fit["kappa_required"] == pytest.approx(0.1381966011250105)
    assert fit["kappa_observed"] > fit["kappa_required"]


def test_decay_is_deterministic(tmp_path):
    p = _cfg(tmp_path, solver={"t_end": 0.5, "snapshot_every": 0.25}, ot={"j": False})
    assert _run("decay", p, tmp_path / "a") == _run("decay", p, tmp_path / "b")
    for name in ("decay.csv", "decay_fit.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dissipation_command(tmp_path):
    p = _cfg(tmp_path, grid={"nx": 48}, solver={"t_end": 1.0, "snapshot_every": 0.25})
    assert _run("dissipation", p, tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "dissipation.json").read_text())
    assert doc["pass"] is True
    rows = list(csv.DictReader((tmp_path / "o" / "dissipation.csv").open()))
    assert len(rows) == 3
    assert (tmp_path / "o" / "dissipation.png").exists()


def test_verify_reports_key1_failure(tmp_path):
    # defaults: the pinned admissible instance
    p = tmp_path / "v.json"
    p.write_text(json.dumps({"schema": 1, "verify": {"samples": 5000}}))
    assert _run("verify", p, tmp_path / "o") == 1
    doc = json.loads((tmp_path / "o" / "verdicts.json").read_text())
    assert doc["key2"]["pass"] and doc["diss_identity"]["pass"] and doc["key1_i"]["pass"]
    assert not doc["key1_iii"]["pass"]


def test_oracle_instance_respects_resolution_floor():
    A = theorem_matrix(1.0, 1.0)
    for k in range(5):
        (m1, S1), (m2, S2), grid, ref = oracle_instance(k, 0, 32, A)
        assert ref >= 0.5
        assert ref == pytest.approx(gaussian_wa(m1, S1, m2, S2, A))
        assert grid.nx == 32


def test_oracle_command(tmp_path):
    p = _cfg(tmp_path, oracle={"cases": 2, "n": 24, "tol": 0.2})
    assert _run("oracle", p, tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "oracle.json").read_text())
    assert set(doc["wa"]) == {"identity", "theorem"}
    assert len(doc["wa"]["theorem"]["cases"]) == 2


def test_simulate_sde_with_pairing(tmp_path):
    p = _cfg(tmp_path, sde={"n": 2000, "dt": 0.01, "t_end": 0.2, "record_every": 5, "paired_init": {"kind": "equilibrium"}})
    assert _run("simulate-sde", p, tmp_path / "o", "--seed", "3") == 0
    x = np.loadtxt(tmp_path / "o" / "particles.txt")
    assert x.shape == (2000, 2)
    rows = list(csv.DictReader((tmp_path / "o" / "paired.csv").open()))
    assert len(rows) == 5
    assert json.loads((tmp_path / "o" / "sde.json").read_text())["seed"] == 3
    assert (tmp_path / "o" / "paired.png").exists()
    assert _run("simulate-sde", p, tmp_path / "o2", "--seed", "3") == 0
    assert (tmp_path / "o" / "particles.txt").read_bytes() == (tmp_path / "o2" / "particles.txt").read_bytes()


@pytest.mark.skipif(shutil.which("twistot") is None, reason="console script not installed")
def test_console_script():
    r = subprocess.run(["twistot", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == cli.__version__
