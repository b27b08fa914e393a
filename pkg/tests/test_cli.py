import csv
import json
import time

import numpy as np
import pytest

from glevy.cli import load_config, main, ConfigError


def run(tmp_path, command, config=None, *extra, name="out"):
    """Run a subcommand in-process; returns (exit code, output dir)."""
    out = tmp_path / name
    argv = [command, "--out", str(out), "--quiet", *extra]
    if config is not None:
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps(config, indent=2))
        argv += ["--config", str(cfg)]
    return main(argv), out


def report(out):
    return json.loads((out / "report.json").read_text())


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_unknown_key_rejected_with_line(tmp_path, capsys):
    text = '{\n  "n_paths": 100,\n  "grid": {\n    "T": 1.0,\n    "bogus": 3\n  }\n}\n'
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(ConfigError, match=r"bad.json:5:.*bogus"):
        load_config(str(p))
    assert main(["simulate", "--config", str(p), "--quiet"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and ":5:" in err["message"]


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "seed": 1,\n  "n_paths": ,\n}\n')
    with pytest.raises(ConfigError, match=r"broken.json:3:"):
        load_config(str(p))


def test_wrong_type_rejected(tmp_path):
    code, _ = run(tmp_path, "simulate", {"n_paths": "many"})
    assert code == 2


def test_simulate_zero_coefficients_constant(tmp_path):
    cfg = {"coefficients": {"model": "zero"}, "y0": 0.75, "grid": {"T": 1.0, "dt": 0.01},
           "n_paths": 5}
    code, out = run(tmp_path, "simulate", cfg)
    assert code == 0
    data = rows(out / "paths.csv")
    assert len(data) == 4 * 5 * 101
    assert {r["y_1"] for r in data} == {repr(0.75)}
    assert report(out)["metrics"]["n_controls"] == 4


def test_simulate_single_path_solvers(tmp_path):
    for solver in ("euler_path", "picard"):
        cfg = {"grid": {"T": 0.5, "dt": 0.01}, "n_paths": 2, "simulate": {"solver": solver}}
        code, out = run(tmp_path, "simulate", cfg, name=solver)
        assert code == 0
        data = rows(out / "paths.csv")
        assert {r["event_flag"] for r in data} <= {"0", "1"}
    assert report(out)["metrics"]["picard_max_iterations"] <= 25


def test_example51_smoke_100_paths_fast(tmp_path):
    start = time.perf_counter()
    code, out = run(tmp_path, "simulate", {"n_paths": 100})
    assert code == 0 and time.perf_counter() - start < 5.0
    assert report(out)["metrics"]["l"] == pytest.approx(1.0)


def test_rerun_is_byte_identical(tmp_path):
    cfg = {"n_paths": 20, "grid": {"T": 1.0, "dt": 0.01}}
    _, a = run(tmp_path, "simulate", cfg, name="a")
    _, b = run(tmp_path, "simulate", cfg, name="b")
    assert (a / "paths.csv").read_bytes() == (b / "paths.csv").read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    _, c = run(tmp_path, "simulate", cfg, "--seed", "1", name="c")
    assert (a / "paths.csv").read_bytes() != (c / "paths.csv").read_bytes()


def test_expect_constant_exact(tmp_path):
    cfg = {"n_paths": 200, "expect": {"kind": "estimate",
                                      "functional": {"type": "constant", "value": 2.5}}}
    code, out = run(tmp_path, "expect", cfg)
    assert code == 0
    m = report(out)["metrics"]
    assert m["value"] == 2.5 and m["se"] == 0.0 and m["is_lower_bound"]


def test_expect_terminal_drift(tmp_path):
    cfg = {"uncertainty": {"d": 1, "measures": [{"atoms": []}], "drifts": [[-1.0], [1.0]],
                           "vols": [[[1.0]]]},
           "n_paths": 4000, "expect": {"kind": "estimate", "functional": {"type": "terminal"}}}
    code, out = run(tmp_path, "expect", cfg)
    assert code == 0
    m = report(out)["metrics"]
    assert abs(m["value"] - 1.0) <= 3 * m["se"]


def test_expect_default_markov(tmp_path):
    code, out = run(tmp_path, "expect", None, "--paths", "4000")
    assert code == 0
    data = rows(out / "expect.csv")
    assert [float(r["M"]) for r in data] == [0.5, 1.0, 2.0]
    assert all(r["pass"] == "1" for r in data)


def test_expect_iterated(tmp_path):
    cfg = {"uncertainty": {"d": 1, "measures": [{"atoms": []}], "drifts": [[-1.0], [1.0]],
                           "vols": [[[1.0]]]},
           "n_paths": 5000,
           "expect": {"kind": "iterated",
                      "functional": {"type": "cylinder", "expr": "x1 + x2", "times": [0.5, 1.0]}}}
    code, out = run(tmp_path, "expect", cfg)
    assert code == 0
    assert report(out)["metrics"]["iterated"] == pytest.approx(1.0, abs=1e-6)


def test_certify_linear_pass_and_enlarged_fail(tmp_path, capsys):
    code, out = run(tmp_path, "certify", {"lyapunov": {"n_samples": 2000}})
    assert code == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["verdicts"]["mean_square"] == "pass"
    enlarged = {"uncertainty": {"d": 1, "measures": [{"atoms": []}], "drifts": [[0.0]],
                                "vols": [[[3.0]]]},
                "lyapunov": {"n_samples": 2000, "decay_rate": 0.5}}
    code, out = run(tmp_path, "certify", enlarged, name="bad")
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["failures"][0]["check"] == "mean_square"
    assert "condition_d" in json.loads((out / "certificate.json").read_text())["witnesses"]


def test_certify_example51_conditional_pass(tmp_path):
    cfg = {"coefficients": {"model": "example51", "l": 1.0},
           "lyapunov": {"decay_rate": 2.0, "lambda1": "example51", "n_samples": 2000}}
    code, out = run(tmp_path, "certify", cfg)
    assert code == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["verdicts"]["mean_square_varying"] == "pass"
    assert cert["conditional_on_horizon"] and cert["constants"]["M1"] > 0


def test_example51_large_l_fails(tmp_path, capsys):
    cfg = {"coefficients": {"l": 3.5}, "grid": {"T": 1.0, "dt": 0.01}, "n_paths": 200,
           "lyapunov": {"n_samples": 1000}}
    code, out = run(tmp_path, "example51", cfg)
    assert code == 1
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["verdicts"]["mean_square_varying"] == "fail"
    assert not cert["ok"]
    assert report(out)["metrics"]["verdict"] == "FAIL"


def test_example51_flags_small_samples(tmp_path):
    cfg = {"grid": {"T": 2.0, "dt": 0.01}, "n_paths": 10, "lyapunov": {"n_samples": 1000},
           "example51": {"checkpoint_dt": 0.1}}
    code, out = run(tmp_path, "example51", cfg)
    assert code == 1
    rep = report(out)
    assert "SE too large" in rep["warnings"]
    for name in ("certificate.json", "decay.csv", "decay.svg"):
        assert (out / name).exists()
    assert (out / "decay.svg").read_text().startswith("<svg")


def test_bdg_default(tmp_path):
    code, out = run(tmp_path, "bdg", {"n_paths": 500})
    assert code == 0
    data = {r["kind"]: r for r in rows(out / "bdg.csv")}
    assert set(data) == {"jump", "brownian", "covariation"}
    assert all(float(r["ratio"]) <= float(r["constant"]) for r in data.values())


def test_bdg_bad_breakpoints(tmp_path):
    code, _ = run(tmp_path, "bdg", {"n_paths": 200, "bdg": {"breakpoints": [0.0, 1.0],
                                                            "coefficients": [1.0, 2.0]}})
    assert code == 2


def test_uncertainty_from_file(tmp_path):
    (tmp_path / "u.json").write_text(json.dumps(
        {"d": 1, "measures": [{"atoms": [[[1.0], 1.0]]}], "drifts": [[0.0]], "vols": [[[1.0]]]}))
    code, out = run(tmp_path, "simulate", {"uncertainty": "u.json", "n_paths": 2,
                                           "grid": {"T": 0.1, "dt": 0.01}})
    assert code == 0
    assert report(out)["metrics"]["n_controls"] == 1
    code, _ = run(tmp_path, "simulate", {"uncertainty": "missing.json"}, name="m")
    assert code == 2


def test_invalid_uncertainty_set_exit_code(tmp_path):
    cfg = {"uncertainty": {"d": 1, "measures": [{"atoms": [[[0.0], 1.0]]}], "drifts": [[0.0]],
                           "vols": [[[1.0]]]}, "n_paths": 2, "grid": {"T": 0.1, "dt": 0.01}}
    code, _ = run(tmp_path, "simulate", cfg)
    assert code == 2


def test_report_has_no_timing(tmp_path):
    _, out = run(tmp_path, "simulate", {"n_paths": 2, "grid": {"T": 0.1, "dt": 0.01}})
    rep = report(out)
    assert "output" not in rep["config"]
    assert not any("time" in k for k in rep["metrics"])
    assert np.isfinite(rep["metrics"]["r"])
