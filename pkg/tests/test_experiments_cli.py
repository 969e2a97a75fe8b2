import json

import pytest

import brwlab as bl
from brwlab.cli import main
from brwlab.errors import ConfigurationError
from brwlab.experiments import ExperimentConfig, run_experiment


def write_binary_scheme(tmp_path):
    p = tmp_path / "binary.json"
    p.write_text(bl.binary_pm1().to_json())
    return str(p)


# --- config validation --------------------------------------------------------


def test_config_requires_known_kind():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(kind="nope", seed=1)


def test_config_requires_seed():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(kind="ode_check", seed=None)


def test_config_requires_n_for_mc(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig(kind="tail", seed=1, scheme=bl.binary_pm1().to_json_dict(),
                         r_list=[1], n=0)


def test_config_rejects_unknown_fields():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_json_dict({"kind": "ode_check", "seed": 1, "bogus": 2})


# --- runners -------------------------------------------------------------------


def test_tail_experiment_csv_and_determinism(tmp_path):
    cfg = dict(kind="tail", seed=12, scheme=bl.binary_pm1().to_json_dict(),
               r_list=[0, 3], n=30_000)
    r1 = run_experiment(ExperimentConfig(**cfg))
    r2 = run_experiment(ExperimentConfig(**cfg))
    r3 = run_experiment(ExperimentConfig(**cfg, workers=3))
    assert r1.csv_text == r2.csv_text == r3.csv_text
    assert r1.canonical_json() == r2.canonical_json() == r3.canonical_json()
    header = r1.csv_text.splitlines()[0]
    assert header == "r,n,hits,ambiguous,p_hat,ci_low,ci_high"
    assert len(r1.csv_text.splitlines()) == 3


def test_tail_experiment_tolerance_checks():
    cfg = ExperimentConfig(kind="tail", seed=5, scheme=bl.binary_pm1().to_json_dict(),
                           r_list=[10], n=60_000,
                           tolerances={"tail_ratio": [0.4, 0.8]})
    rep = run_experiment(cfg)
    assert rep.checks and rep.passed  # exact ratio at r=10 is ~0.568
    cfg2 = ExperimentConfig(kind="tail", seed=5, scheme=bl.binary_pm1().to_json_dict(),
                            r_list=[10], n=60_000,
                            tolerances={"tail_ratio": [0.9, 1.1]})
    assert not run_experiment(cfg2).passed


def test_grid_experiment(tmp_path):
    cfg = ExperimentConfig(kind="grid", seed=0, scheme=bl.binary_pm1().to_json_dict(),
                           r_max=60, r_list=[20],
                           tolerances={"r2w_window": [3.5, 6.6]},
                           out_dir=str(tmp_path))
    rep = run_experiment(cfg)
    assert rep.passed
    assert (tmp_path / "grid.csv").exists()
    assert (tmp_path / "grid.json").exists()
    header = (tmp_path / "grid.csv").read_text().splitlines()[0]
    assert header == "r,h,w,r2w,g,r3g"


def test_pdf_experiment():
    cfg = ExperimentConfig(kind="pdf", seed=3, scheme=bl.binary_pm1().to_json_dict(),
                           r_list=[3], n=50_000)
    rep = run_experiment(cfg)
    assert rep.rows[0]["hits_eq"] > 0


def test_laplace_experiment():
    cfg = ExperimentConfig(kind="laplace_gt", seed=4, scheme=bl.binary_pm1().to_json_dict(),
                           r_list=[4], alpha=1.0, n=40_000)
    rep = run_experiment(cfg)
    assert 0.0 < rep.rows[0]["estimate"] < 1.0


def test_mobile_experiment():
    cfg = ExperimentConfig(kind="mobile", seed=6, scheme={"2": 1.0 / 12.0},
                           r_list=[3], n=50_000)
    rep = run_experiment(cfg)
    assert rep.rows[0]["p_gt"] > 0.05
    assert "laplace" in rep.derived


def test_multitype_reduce_experiment(three_type_spec):
    cfg = ExperimentConfig(kind="multitype_reduce", seed=7,
                           scheme=three_type_spec.to_json_dict(),
                           base_type="A", n=200,
                           tolerances={"rho_tol": 1e-9})
    rep = run_experiment(cfg)
    assert rep.passed
    assert abs(rep.rows[0]["drift"]) <= 1e-10
    assert rep.derived["boundary_means"]["B"] == pytest.approx(0.5, abs=1e-9)


def test_ode_check_experiment():
    rep = run_experiment(ExperimentConfig(kind="ode_check", seed=0))
    assert rep.passed


# --- CLI -----------------------------------------------------------------------


def test_cli_psi(capsys):
    rc = main(["psi", "--t", "2.0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["psi"] - 1.0861) < 1e-3


def test_cli_big_r(capsys):
    rc = main(["big-r", "--alpha", "1.0", "--sigma2", "1.0", "--eta2", "1.0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["big_R"] - 2.4017) < 1e-3


def test_cli_tilt(tmp_path, capsys):
    scheme = write_binary_scheme(tmp_path)
    rc = main(["tilt", "--t", "0.01", "--scheme", scheme])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 < out["h_inf"] < 1.0
    assert abs(sum(o["prob"] for o in out["tilted"]["outcomes"]) - 1.0) <= 1e-12


def test_cli_tail_and_exit_codes(tmp_path, capsys):
    scheme = write_binary_scheme(tmp_path)
    rc = main(["tail", "--scheme", scheme, "--r", "0", "--n", "20000", "--seed", "2",
               "--out", str(tmp_path / "out")])
    assert rc == 0
    assert (tmp_path / "out" / "tail.csv").exists()
    capsys.readouterr()
    # missing file -> configuration error -> exit 1
    rc = main(["tail", "--scheme", str(tmp_path / "nope.json"), "--r", "1",
               "--n", "10", "--seed", "1"])
    assert rc == 1


def test_cli_report_with_tolerance_failure(tmp_path, capsys):
    cfg = {
        "kind": "tail", "seed": 5, "scheme": bl.binary_pm1().to_json_dict(),
        "r_list": [10], "n": 40000, "tolerances": {"tail_ratio": [0.9, 1.1]},
    }
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    rc = main(["report", "--config", str(p)])
    assert rc == 2  # declared tolerance fails (true ratio ~ 0.57)


def test_cli_grid(tmp_path, capsys):
    scheme = write_binary_scheme(tmp_path)
    rc = main(["grid", "--scheme", scheme, "--r-max", "40", "--seed", "0"])
    assert rc == 0


def test_cli_ode(capsys):
    rc = main(["ode", "--seed", "0"])
    assert rc == 0
