import csv
import json

import numpy as np
import pytest

from hierrg.cli import main
from hierrg.io import fmt, write_csv, write_json

FAST = ["--phi-max", "10", "--n-points", "513"]


def run(tmp_path, *args):
    out = tmp_path / "out"
    return main([*args, "--out", str(out)]), out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_flow_zero(tmp_path):
    rc, out = run(tmp_path, "flow", "--v0", "zero", "--steps", "5", *FAST)
    assert rc == 0
    rows = read_csv(out / "flow.csv")
    assert rows[0][:3] == ["step", "c0", "c2"] and len(rows) == 6
    assert all(abs(float(v)) < 1e-14 for v in rows[-1][1:])
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["config"]["steps"] == 5 and prov["version"]


def test_flow_divergence_keeps_partial_output(tmp_path):
    rc, out = run(tmp_path, "flow", "--g", "0.2", "--mu", "-0.05", "--steps", "40", *FAST)
    s = json.loads((out / "summary.json").read_text())
    assert rc == 0 and s["diverged"] and s["steps_completed"] < 40
    assert len(read_csv(out / "flow.csv")) == s["steps_completed"] + 1


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 2, "v0": "zero", "phi_max": 10, "n_points": 513}))
    rc, out = run(tmp_path, "flow", "--config", str(cfg), "--steps", "3")
    assert rc == 0 and len(read_csv(out / "flow.csv")) == 4


@pytest.mark.parametrize("args", [
    ["flow", "--n-points", "3"],
    ["flow", "--backend", "mc", "--n-samples", "10"],
    ["sample", "--depth", "12", "--branching", "8"],
    ["critical-mu", "--mu-lo", "0.1"],
])
def test_config_errors_exit_2(tmp_path, args):
    assert run(tmp_path, *args)[0] == 2


def test_unknown_config_key_and_flag(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stepz": 2}))
    assert run(tmp_path, "flow", "--config", str(cfg))[0] == 2
    with pytest.raises(SystemExit) as info:
        main(["flow", "--bogus", "1"])
    assert info.value.code == 2


def test_fixpoint_gaussian_and_bad_guess(tmp_path, capsys):
    rc, out = run(tmp_path, "fixpoint", "--epsilon", "0", "--guess", "zero", *FAST)
    s = json.loads((out / "fixedpoint.json").read_text())
    assert rc == 0 and s["kind"] == "gaussian"
    assert np.allclose(s["eigenvalues"][:3], [2**1.5, 1.0, 2**-1.5], rtol=1e-4)
    rc, _ = run(tmp_path, "fixpoint", "--epsilon", "0.1", "--guess-scale", "200",
                "--max-iter", "5", *FAST)
    err = capsys.readouterr().err
    assert rc == 3 and "trace:" in err


def test_critical_mu_free_case(tmp_path):
    rc, out = run(tmp_path, "critical-mu", "--g", "0")
    assert rc == 0 and json.loads((out / "mu_c.json").read_text())["mu_c"] == 0.0


def test_sample_gaussian(tmp_path):
    rc, out = run(tmp_path, "sample", "--D", "6", "--replicas", "100", "--seed", "3")
    rows = read_csv(out / "correlations.csv")
    s = json.loads((out / "summary.json").read_text())
    assert rc == 0 and rows[0] == ["distance", "cov_phi", "cov_phi_stderr", "cov_phi2",
                                   "cov_phi2_stderr"]
    assert len(rows) == 7 and s["branching"] == 8
    got = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(np.abs(got - s["exact_cov_phi"]) < 0.01)


def test_observable_series(tmp_path):
    rc, out = run(tmp_path, "observable", "--k", "1", "--steps", "30", "--cumulants", "true",
                  *FAST)
    rows = read_csv(out / "series.csv")
    s = json.loads((out / "cumulants.json").read_text())
    assert rc == 0 and rows[0] == ["q", "delta_b_diff", "partial_sum"]
    assert float(rows[-1][2]) == pytest.approx(s["S_T"], rel=1e-12)
    assert abs(s["cumulants"]["4"]) < 1e-6


def test_selftest_exit_codes(tmp_path, capsys):
    rc, out = run(tmp_path, "selftest", "--selftest-samples", "20000", *FAST)
    table = capsys.readouterr().out
    assert rc == 0 and table.count("PASS") == 4
    assert run(tmp_path, "selftest", "--selftest-samples", "20000", "--force-fail", "true",
               *FAST)[0] == 1
    assert json.loads((out / "selftest.json").read_text())["forced failure"]["passed"] is False


def test_writers_round_trip(tmp_path):
    assert fmt(0.1) == "0.10000000000000001" and fmt(np.int64(3)) == "3"
    write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 0.1], [2, np.float64(1 / 3)]])
    rows = read_csv(tmp_path / "a.csv")
    assert float(rows[2][1]) == 1 / 3
    write_json(tmp_path / "a.json", {"b": np.arange(2), "a": np.float64(np.inf)})
    assert json.loads((tmp_path / "a.json").read_text()) == {"a": "inf", "b": [0, 1]}
