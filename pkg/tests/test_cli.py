import json

import numpy as np
import pytest

from dualfilt import FiniteModel, LGModel, validate_lg_model, validate_model
from dualfilt.cli import main

from conftest import write_model_json


@pytest.fixture
def finite_cfg(tmp_path, canon2):
    return str(write_model_json(tmp_path / "finite.json", canon2))


@pytest.fixture
def lg_cfg(tmp_path, lg_scalar):
    return str(write_model_json(tmp_path / "lg.json", lg_scalar))


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if out else None)


def test_validate_finite(finite_cfg, capsys):
    code, rep = run_json(capsys, ["model", "validate", "--config", finite_cfg])
    assert code == 0
    assert rep["valid"] is True
    assert rep["kind"] == "finite"
    assert rep["d"] == 2 and rep["m"] == 1


def test_validate_lg(lg_cfg, capsys):
    code, rep = run_json(capsys, ["model", "validate", "--config", lg_cfg])
    assert code == 0
    assert rep["kind"] == "linear_gaussian"


def test_invalid_model_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "d": 2, "m": 1,
        "A": [[-1.0, 0.5], [1.0, -1.0]],
        "H": [[0.0], [1.0]],
        "prior": [0.5, 0.5],
    }))
    code = main(["model", "validate", "--config", str(bad)])
    assert code == 2
    assert "validation error" in capsys.readouterr().err


def test_missing_config_exits_2(capsys):
    assert main(["model", "validate"]) == 2


def test_unreadable_config_exits_2(capsys):
    assert main(["model", "validate", "--config", "/nonexistent.json"]) == 2


def test_singular_prior_exits_2(tmp_path, capsys):
    # singular prior covariance is rejected before the solver runs
    lg = LGModel(
        A=np.zeros((1, 1)),
        H=np.ones((1, 1)),
        sigma=np.ones((1, 1)),
        m0=np.zeros(1),
        Sigma0=np.zeros((1, 1)),
    )
    cfg = write_model_json(tmp_path / "sing.json", lg)
    code = main(["dual", "mee", "--config", str(cfg), "--steps", "20"])
    assert code == 2
    assert "validation error" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, capsys):
    # unobserved unstable drift blows the Riccati covariance past the cap
    lg = LGModel(
        A=np.array([[20.0]]),
        H=np.zeros((1, 1)),
        sigma=np.ones((1, 1)),
        m0=np.zeros(1),
        Sigma0=np.ones((1, 1)),
    )
    cfg = write_model_json(tmp_path / "blowup.json", lg)
    code = main(["filter", "kalman", "--config", str(cfg), "--steps", "400"])
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err


def test_simulate_finite(finite_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["simulate", "--config", finite_cfg, "--paths", "500", "--steps", "20"],
    )
    assert code == 0
    freq = np.array(rep["terminal_state_frequency"])
    assert abs(freq.sum() - 1.0) < 1e-12
    assert rep["config"]["seed"] == 0


def test_filter_wonham(finite_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["filter", "wonham", "--config", finite_cfg, "--paths", "200",
         "--steps", "50"],
    )
    assert code == 0
    pi = np.array(rep["mean_terminal_pi"])
    assert abs(pi.sum() - 1.0) < 1e-10


def test_filter_kalman(lg_cfg, capsys):
    code, rep = run_json(
        capsys, ["filter", "kalman", "--config", lg_cfg, "--steps", "100"]
    )
    assert code == 0
    assert np.array(rep["terminal_cov"]).shape == (1, 1)


def test_dual_det_check_reports_z_score(finite_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["dual", "det-check", "--config", finite_cfg, "--terminal", "0,1",
         "--paths", "2000", "--steps", "100", "--seed", "3"],
    )
    assert code == 0
    assert "z_score" in rep
    assert abs(rep["z_score"]) <= 4.0
    assert rep["total"] == rep["var0"] + rep["running"]


def test_dual_det_opt(finite_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["dual", "det-opt", "--config", finite_cfg, "--terminal", "0,1",
         "--steps", "50"],
    )
    assert code == 0
    assert rep["u_norm"] > 0.0


def test_dual_lq(lg_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["dual", "lq", "--config", lg_cfg, "--terminal", "1", "--steps", "400"],
    )
    assert code == 0
    assert abs(rep["gap"]) < 1e-4


def test_dual_mn_compare(lg_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["dual", "mn-compare", "--config", lg_cfg, "--steps", "50", "--seed", "9"],
    )
    assert code == 0
    assert abs(rep["two_J1_minus_value"]) < 1e-8


def test_bsde_solve(finite_cfg, capsys):
    code, rep = run_json(
        capsys,
        ["bsde", "solve", "--config", finite_cfg, "--terminal", "0,1",
         "--paths", "2000", "--steps", "50", "--seed", "4"],
    )
    assert code == 0
    assert len(rep["Y0"]) == 2
    assert rep["var0"] >= 0.0


def test_report_deterministic_modulo_timestamp(finite_cfg, capsys):
    argv = ["dual", "det-check", "--config", finite_cfg, "--terminal", "0,1",
            "--paths", "1000", "--steps", "50", "--seed", "5"]
    _, a = run_json(capsys, argv)
    _, b = run_json(capsys, argv)
    a.pop("timestamp")
    b.pop("timestamp")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_out_file_written(finite_cfg, tmp_path, capsys):
    out = tmp_path / "report.json"
    code = main(
        ["model", "validate", "--config", finite_cfg, "--out", str(out)]
    )
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["valid"] is True
    assert rep["input_sha256"] is not None
