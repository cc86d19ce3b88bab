import csv
import json

import numpy as np
import pytest

from cavsense import cli
from cavsense.protocol import DIVERGENT_VARIANCE


def run(tmp_path, command, cfg=None, *args, name="out"):
    argv = [command, "--out", str(tmp_path / name)]
    if cfg is not None:
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps(cfg))
        argv += ["--config", str(p)]
    code = cli.main(argv + list(args))
    out = tmp_path / name
    manifest = json.loads((out / "manifest.json").read_text()) if (out / "manifest.json").exists() else None
    return code, out, manifest


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


SMALL_OPT = {"n_spins": [4, 6], "cooperativity": [100], "gamma_over_kappa": [1.0], "optimizer": {"n_restarts": 3}}


def test_optimize_outputs_and_determinism(tmp_path):
    code, out, man = run(tmp_path, "optimize", SMALL_OPT, "--seed", "5", name="a")
    assert code == 0
    assert header(out / "scan.csv") == ["N", "C", "gamma_over_kappa", "P", "N_variance"]
    assert header(out / "exponents.csv") == ["C", "gamma_over_kappa", "alpha", "n_points"]
    assert {"scan.csv", "exponents.csv", "protocol_N4_C100_r1.json", "restarts_N6_C100_r1.json"} <= set(man["files"])
    assert man["seed"] == 5 and len(man["config_hash"]) == 64
    _, out2, _ = run(tmp_path, "optimize", SMALL_OPT, "--seed", "5", "--threads", "2", name="b")
    assert (out / "scan.csv").read_text() == (out2 / "scan.csv").read_text()


def test_continuation_never_worsens(tmp_path):
    _, a, _ = run(tmp_path, "optimize", SMALL_OPT, name="a")
    _, b, man = run(tmp_path, "optimize", {**SMALL_OPT, "continuation": 1}, name="b")
    va = np.loadtxt(a / "scan.csv", delimiter=",", skiprows=1)[:, -1]
    vb = np.loadtxt(b / "scan.csv", delimiter=",", skiprows=1)[:, -1]
    assert np.all(vb <= va)
    rec = json.loads((b / "restarts_N4_C100_r1.json").read_text())["records"]
    assert any(r["seed"][1] < 0 for r in rec)


def test_config_errors_exit_two(tmp_path):
    assert run(tmp_path, "optimize", {"bogus": 1})[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "optimize", {"optimizer": {"lr": 0.1}})[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "optimize", {"steps": 0})[0] == cli.EXIT_CONFIG
    assert cli.main(["evaluate", "--out", str(tmp_path / "e"), "--seed", "-1"]) == cli.EXIT_CONFIG
    assert run(tmp_path, "evaluate", {"n_spins": 4})[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "pulse", {"protocol": {"theta0": [0, 0, 0]}, "cooperativity": 100, "gamma_over_kappa": 1, "duration": None})[0] == cli.EXIT_CONFIG


def test_regression_failure_exit_four(tmp_path, monkeypatch):
    good = cli.load_table("ghz")
    row = dict(good["rows"][0])
    tables = {
        "ghz": {**good, "rows": [row]},
        "dicke": {**good, "rows": [{**row, "reference": 10 * row["reference"]}]},
    }
    monkeypatch.setattr(cli, "load_table", lambda name: tables[name])
    code, out, man = run(tmp_path, "evaluate", None, "--table", "ghz", name="ok")
    assert code == cli.EXIT_OK and man["results"]["failed"] == 0
    code, out, man = run(tmp_path, "evaluate", None, "--table", "all", name="bad")
    assert code == cli.EXIT_TOLERANCE and man["results"]["failed"] == 1
    assert header(out / "regression.csv")[:3] == ["table", "row", "N"]


def test_identity_protocol_reports_sentinel(tmp_path):
    cfg = {"protocol": {"theta0": [0, 0, 0]}, "n_spins": 6, "cooperativity": 100, "gamma_over_kappa": 1.0}
    code, out, man = run(tmp_path, "evaluate", cfg)
    assert code == 0 and man["results"]["divergent"]
    assert json.loads((out / "evaluation.json").read_text())["variance"] == DIVERGENT_VARIANCE


def test_pulse_round_trip(tmp_path):
    # N=40, C=1e4, gamma/kappa=0.01 row, cavity detuning 12 g
    code, out, man = run(tmp_path, "pulse", {"table": "ghz", "row": 5})
    assert code == 0
    assert man["results"]["round_trip_residual"][0] < 1e-6
    assert man["results"]["quoted_n_variance"] == {"ghz": 0.03, "dicke": 0.08}
    assert header(out / "pulse_step1.csv") == ["t", "re_zeta", "im_zeta", "re_eta", "im_eta"]


def test_qfunc_integral_matches_trace(tmp_path):
    row = cli.load_table("ghz")["rows"][3]
    cfg = {"protocol": row["protocol"], "n_spins": row["n_spins"], "cooperativity": row["cooperativity"], "gamma_over_kappa": row["gamma_over_kappa"]}
    code, out, man = run(tmp_path, "qfunc", cfg)
    assert code == 0
    for s in man["results"]["steps"]:
        assert s["integral"] == pytest.approx(s["trace"], abs=1e-3)
    assert header(out / "qfunc_step0.csv") == ["theta", "phi", "Q"]


def test_sense_oracle_column(tmp_path):
    cfg = {"probe": "ghz", "n_spins": 6, "gamma_phi_over_J": [0.1, 1.0], "t_max": 1.0, "n_t": 6, "oracle": True}
    code, out, man = run(tmp_path, "sense", cfg)
    assert code == 0
    for name in ("sense_gphi0.1.csv", "sense_gphi1.csv"):
        assert header(out / name) == ["Jt", "variance", "trace", "purity", "closed_form", "oracle"]
        d = np.loadtxt(out / name, delimiter=",", skiprows=1)
        assert np.abs(d[:, 5] / d[:, 1] - 1).max() < 1e-6
        assert np.abs(d[:, 4] / d[:, 1] - 1).max() < 1e-6


def test_sense_guards(tmp_path):
    assert run(tmp_path, "sense", {"n_spins": 80})[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "sense", {"n_spins": 10, "oracle": True, "n_t": 3}, name="o")[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "sense", {"probe": "squeezed"}, name="p")[0] == cli.EXIT_CONFIG


def test_sense_dicke_reference_table(tmp_path):
    code, out, _ = run(tmp_path, "sense", {"probe": "dicke", "n_spins": 6, "gamma_phi_over_J": [0.1], "n_t": 5})
    assert code == 0
    assert header(out / "dicke_closed_form.csv") == ["Jt", "variance"]


def test_fit_exponent():
    N = np.array([10, 20, 40])
    assert cli.fit_exponent(N, 3.0 * N**-1.5) == pytest.approx(1.5, rel=1e-12)
