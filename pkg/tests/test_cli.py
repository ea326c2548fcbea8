import csv
import json

import numpy as np
import pytest

from exactsde.cli import main


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out


def _json(out):
    return json.loads(out.out)


@pytest.mark.parametrize("mid, code", [("gbm", 0), ("bm", 0), ("heisenberg_asym", 2), ("nonaffine_drift", 2)])
def test_check_exit_codes(capsys, mid, code):
    got, out = _run(capsys, "check", "--model", mid)
    assert got == code
    report = _json(out)
    assert report["exit_code"] == code
    if code == 2:
        assert report["witness"] is not None


def test_nonaffine_fails_at_drift(capsys):
    _, out = _run(capsys, "check", "--model", "nonaffine_drift")
    assert _json(out)["stage"] == "drift"


def test_unknown_model_is_an_error(capsys):
    code, out = _run(capsys, "check", "--model", "arcsin")
    assert code == 1 and "unknown model" in out.err


def test_missing_model_is_an_error(capsys):
    code, out = _run(capsys, "check")
    assert code == 1 and "no model" in out.err


def test_shape_mismatch_is_rejected_before_work(capsys, tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\nmodel = inline\n[inline]\np = 2\nd = 1\nr = 1\nlower = 0, 0\nupper = 1, 1\n"
                   "sigma = 1\ndrift = 0; 0\n")
    code, out = _run(capsys, "simulate", "--config", str(cfg))
    assert code == 1 and "sigma has shape" in out.err


def test_simulate_brownian_motion_csv(capsys, tmp_path):
    path = tmp_path / "bm.csv"
    code, out = _run(capsys, "simulate", "--model", "bm", "--paths", "1000", "--seed", "5", "--out", str(path))
    assert code == 0
    summary = _json(out)
    assert summary["scheme"] == "exact" and summary["n_paths"] == 1000 and summary["seed"] == 5
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["path", "t", "x1", "alive"]
    assert len(rows) == 1 + 1000 * summary["nodes"]
    ms = summary["moments"]
    assert abs(ms["mean"][0]) <= 3 * ms["mean_se"][0]
    assert abs(ms["cov"][0][0] - 1.0) <= 3 * ms["var_se"][0]


def test_simulate_with_euler_records_scheme(capsys, tmp_path):
    path = tmp_path / "gbm.csv"
    code, out = _run(capsys, "simulate", "--model", "gbm", "--scheme", "euler", "--paths", "50",
                     "--dt", "0.25", "--out", str(path))
    assert code == 0
    assert _json(out)["scheme"] == "euler"
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["path", "t", "x1", "x2", "alive"]
    assert len(rows) == 1 + 50 * 5


def test_simulate_reports_oracle(capsys):
    _, out = _run(capsys, "simulate", "--model", "cir_const", "--paths", "20000", "--seed", "2")
    s = _json(out)
    assert s["oracle"] is not None
    assert abs(s["moments"]["mean"][0] - s["oracle"]["mean"][0]) <= 3 * s["moments"]["mean_se"][0]


def test_milstein_refuses_non_commuting_noise(capsys):
    code, out = _run(capsys, "simulate", "--model", "heisenberg_asym", "--scheme", "milstein", "--paths", "10")
    assert code == 1


def test_straighten_heisenberg(capsys):
    code, out = _run(capsys, "straighten", "--model", "heisenberg")
    assert code == 0
    report = _json(out)
    assert report["reference_diff"] <= 1e-6
    assert report["p3"]["verdict"] == "pass"


def test_straighten_gbm_p3(capsys):
    code, out = _run(capsys, "straighten", "--model", "gbm")
    report = _json(out)
    assert code == 0 and report["p3"]["max_residual"] <= 1e-5


def test_build_writes_representation(capsys, tmp_path):
    path = tmp_path / "rep.csv"
    code, out = _run(capsys, "build", "--model", "heisenberg", "--out", str(path))
    assert code == 0
    assert _json(out)["validation"]["verdict"] == "pass"
    assert next(csv.reader(open(path))) == ["t", "xt1", "T11", "T12", "T21", "T22", "c1", "c2"]


def test_inline_config_simulation(capsys, tmp_path):
    cfg = tmp_path / "ou.ini"
    cfg.write_text("[run]\nmodel = inline\npaths = 4000\nseed = 1\n[start]\nx = 1.0\n[grid]\nt_end = 1.0\n"
                   "n_nodes = 3\n[inline]\np = 1\nd = 1\nr = 1\nstate = x\nlower = -5\nupper = 5\n"
                   "sigma = 0.5\ndrift = 0.8*(0.5 - x)\n")
    code, out = _run(capsys, "simulate", "--config", str(cfg))
    assert code == 0
    ms = _json(out)["moments"]
    want = 0.5 + 0.5 * np.exp(-0.8)
    assert abs(ms["mean"][0] - want) <= 3 * ms["mean_se"][0]


def test_seed_precedence(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[run]\nmodel = bm\nseed = 1\npaths = 10\n")
    monkeypatch.setenv("EXACTSDE_SEED", "7")
    _, out = _run(capsys, "simulate", "--config", str(cfg))
    assert _json(out)["seed"] == 7
    _, out = _run(capsys, "simulate", "--config", str(cfg), "--seed", "9")
    assert _json(out)["seed"] == 9


def test_benchmark_needs_catalog_model(capsys, tmp_path):
    cfg = tmp_path / "ou.ini"
    cfg.write_text("[run]\nmodel = inline\n[inline]\np = 1\nd = 1\nr = 1\nlower = -5\nupper = 5\n"
                   "sigma = 0.5\ndrift = 0\n")
    code, out = _run(capsys, "benchmark", "--config", str(cfg))
    assert code == 1 and "oracle" in out.err
