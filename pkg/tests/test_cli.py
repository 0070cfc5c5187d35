import json
import math

import numpy as np
import pytest

from stochcasimir.cli import fixture_path, main


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = main([*args, "--out", str(out)])
    return code, out


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def fixture_cfg(name):
    return json.loads(fixture_path(name).read_text())


def test_analyze_rigid_body(tmp_path):
    code, out = run(tmp_path, "analyze", "--config", str(fixture_path("rigid_body.json")))
    assert code == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["certified"] and cert["sign"] == "positive"
    assert cert["sigma_sq_tight"] == pytest.approx(0.75, rel=1e-12)
    assert cert["sigma_sq_analytic"] == 0.25
    (st,) = cert["stopping_times"]
    assert st["eps"] / st["delta"] == pytest.approx(100.0)
    assert st["T_max"] == pytest.approx(math.log(100) / 0.75, rel=1e-12)


def test_analyze_intermediate_axis_fails(tmp_path):
    cfg = fixture_cfg("rigid_body.json")
    cfg["system"]["params"]["I"] = [2.0, 3.0, 1.0]
    code, out = run(tmp_path, "analyze", "--config", write_cfg(tmp_path, cfg))
    assert code == 1
    rep = json.loads((out / "certificate.json").read_text())
    assert rep["reason"] == "second variation indefinite for all phi in grid"


@pytest.mark.parametrize("pi3,expected", [(2.1, 0), (1.9, 1)])
def test_analyze_heavy_top(tmp_path, pi3, expected):
    cfg = fixture_cfg("heavy_top.json")
    cfg["equilibrium"][2] = pi3
    code, _ = run(tmp_path, "analyze", "--config", write_cfg(tmp_path, cfg))
    assert code == expected


def test_analyze_kubo_unbounded(tmp_path):
    code, out = run(tmp_path, "analyze", "--config", str(fixture_path("kubo.json")))
    cert = json.loads((out / "certificate.json").read_text())
    assert code == 0 and cert["sigma_sq_tight"] == 0.0
    assert cert["stopping_times"][0]["unbounded"] is True


def test_simulate_kubo(tmp_path):
    code, out = run(tmp_path, "simulate", "--config", str(fixture_path("kubo.json")), "--paths", "50",
                    "--t-final", "5")
    assert code == 0
    header = (out / "ensemble.csv").read_text().splitlines()[0].split(",")
    data = np.loadtxt(out / "ensemble.csv", delimiter=",", skiprows=1)
    mean = data[:, header.index("mean_Pi1")]
    assert np.ptp(mean) < 1e-10
    hist = data[:, [i for i, c in enumerate(header) if c.startswith("hist_") and c[5:].isdigit()]]
    assert np.all((hist > 0).sum(axis=1) == 1)  # a single occupied bin at every time
    meta = json.loads((out / "ensemble.meta.json").read_text())
    assert meta["master_seed"] == 20240603 and meta["n_failed"] == 0


def test_simulate_rigid_body_short(tmp_path):
    code, out = run(tmp_path, "simulate", "--config", str(fixture_path("rigid_body.json")),
                    "--paths", "64", "--t-final", "2")
    assert code == 0
    header = (out / "ensemble.csv").read_text().splitlines()[0].split(",")
    for col in ("t", "mean_Pi1", "var_Pi1", "mean_HCnorm", "stderr_HCnorm", "exit_freq", "hist_0", "hist_199"):
        assert col in header
    data = np.loadtxt(out / "ensemble.csv", delimiter=",", skiprows=1)
    assert np.all(np.abs(data[:, header.index("mean_Pi1")] - 1) < 1e-3)


def test_simulate_linearized_model(tmp_path):
    cfg = fixture_cfg("rigid_body.json")
    cfg["simulate"].update({"model": "linearized", "n_paths": 20, "t_final": 1.0})
    del cfg["simulate"]["histogram"]
    code, out = run(tmp_path, "simulate", "--config", write_cfg(tmp_path, cfg))
    assert code == 0
    meta = json.loads((out / "ensemble.meta.json").read_text())
    assert meta["model"] == "linearized"


def test_simulate_is_byte_deterministic(tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["simulate", "--config", str(fixture_path("rigid_body.json")), "--paths", "30",
                     "--t-final", "1", "--out", str(out)]) == 0
        outs.append(((out / "ensemble.csv").read_bytes(), (out / "ensemble.meta.json").read_bytes()))
    assert outs[0] == outs[1]


@pytest.mark.parametrize("mutate", [
    lambda c: c["simulate"].update(n_paths=0),
    lambda c: c.update(unknown_key=1),
    lambda c: c["simulate"].update(dt=-0.1),
    lambda c: c["system"].update(type="pendulum"),
])
def test_invalid_config_is_input_error(tmp_path, mutate, capsys):
    cfg = fixture_cfg("rigid_body.json")
    mutate(cfg)
    code, _ = run(tmp_path, "simulate", "--config", write_cfg(tmp_path, cfg))
    assert code == 2
    assert "input error" in capsys.readouterr().err


def test_paths_flag_zero_rejected(tmp_path):
    code, _ = run(tmp_path, "simulate", "--config", str(fixture_path("kubo.json")), "--paths", "0")
    assert code == 2


def test_missing_config_file(tmp_path):
    code, _ = run(tmp_path, "analyze", "--config", str(tmp_path / "nope.json"))
    assert code == 2


def test_invalid_physics_is_input_error(tmp_path):
    cfg = fixture_cfg("rigid_body.json")
    cfg["system"]["params"]["I"] = [3.0, -2.0, 1.0]
    code, _ = run(tmp_path, "analyze", "--config", write_cfg(tmp_path, cfg))
    assert code == 2


def test_verify_bounds_rigid_body(tmp_path):
    code, out = run(tmp_path, "verify-bounds", "--config", str(fixture_path("rigid_body.json")),
                    "--paths", "2000", "--dt", "0.01")
    assert code == 0
    rep = json.loads((out / "bounds.json").read_text())
    assert rep["passed"] and rep["sigma_sq"] == pytest.approx(0.75)
    assert rep["t_final"] >= rep["T_max"]
    rows = np.loadtxt(out / "bounds.csv", delimiter=",", skiprows=1)
    assert rows.shape[1] == 9


def test_verify_bounds_detects_wrong_sigma(tmp_path, capsys):
    code, out = run(tmp_path, "verify-bounds", "--config", str(fixture_path("rigid_body.json")),
                    "--paths", "2000", "--dt", "0.01", "--sigma-sq", str(0.75 / 10))
    assert code == 1
    rep = json.loads((out / "bounds.json").read_text())
    assert not rep["passed"] and rep["sigma_sq_overridden"]
    assert rep["violations"]["gronwall"] and all(v["margin"] < 0 for v in rep["violations"]["gronwall"])
    assert "violated" in capsys.readouterr().out


def test_verify_bounds_heavy_top(tmp_path):
    code, out = run(tmp_path, "verify-bounds", "--config", str(fixture_path("heavy_top.json")),
                    "--paths", "200", "--t-final", "5")
    assert code == 0
    assert json.loads((out / "bounds.json").read_text())["T_max"] is None


def test_verify_bounds_uncertified_is_negative(tmp_path):
    cfg = fixture_cfg("heavy_top.json")
    cfg["equilibrium"][2] = 1.9
    code, _ = run(tmp_path, "verify-bounds", "--config", write_cfg(tmp_path, cfg))
    assert code == 1


def test_shear_fixtures(tmp_path):
    code, out = run(tmp_path, "shear", "--config", str(fixture_path("shear_cosh.json")))
    assert code == 0
    rep = json.loads((out / "shear.json").read_text())
    assert rep["sigma1_sq"] == pytest.approx(0.01, rel=1e-6)
    assert rep["T_max"] == pytest.approx(460.517, rel=1e-5)
    code, out = run(tmp_path, "shear", "--config", str(fixture_path("shear_couette.json")))
    assert code == 1
    assert json.loads((out / "shear.json").read_text())["details"]["verdict"] == "degenerate"


def test_shear_profile_flag(tmp_path):
    code, _ = run(tmp_path, "shear", "--profile", str(fixture_path("shear_cosh.csv")))
    assert code == 0


def test_shear_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,u,eta_1\n0,1,0\n0.1,1,zero\n")
    code, _ = run(tmp_path, "shear", "--profile", str(bad))
    assert code == 2
    assert "bad.csv:3:" in capsys.readouterr().err


def test_convergence_command(tmp_path):
    cfg = fixture_cfg("rigid_body.json")
    cfg["convergence"].update(n_paths=20, dt_levels=[2.0**-k for k in range(5, 9)], reference_factor=8)
    code, out = run(tmp_path, "convergence", "--config", write_cfg(tmp_path, cfg))
    assert code == 0
    rep = json.loads((out / "convergence.json").read_text())
    assert rep["order"] == pytest.approx(1.0, abs=0.25) and len(rep["errors"]) == 4


def test_convergence_deterministic_midpoint(tmp_path):
    cfg = fixture_cfg("rigid_body.json")
    cfg["convergence"].update(n_paths=2, dt_levels=[2.0**-k for k in range(4, 8)], reference_factor=8,
                              scheme="implicit_midpoint", deterministic=True)
    code, out = run(tmp_path, "convergence", "--config", write_cfg(tmp_path, cfg))
    assert code == 0
    assert json.loads((out / "convergence.json").read_text())["order"] == pytest.approx(2.0, abs=0.2)


def test_convergence_zero_model_notice(tmp_path):
    cfg = fixture_cfg("rigid_body.json")
    cfg["system"]["params"] = {"I": [1.0, 1.0, 1.0], "sigma": 0.0}
    cfg["convergence"].update(n_paths=2, dt_levels=[0.1, 0.05, 0.025])
    code, out = run(tmp_path, "convergence", "--config", write_cfg(tmp_path, cfg))
    rep = json.loads((out / "convergence.json").read_text())
    assert code == 0 and rep["order"] is None and "zero" in rep["notice"]
