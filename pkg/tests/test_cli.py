import csv
import json
from pathlib import Path

import numpy as np
import pytest

from sgdthermo import cli, experiments, io, models
from sgdthermo.errors import CapabilityError, InvalidArgument
from sgdthermo.oracle_suite import run_suite

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_WR = """
[experiment]
name = "small_wr"
kind = "stationary"

[model]
kind = "nonlinear-regression"
M = 200

[engine]
modes = ["sgd-wr"]
eta = 1e-7
m = 10
steps = 30_000
burn_in = 10_000
runs = 2
seed = 4

[analysis]
ells = [1, 2]
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_bundled_configs_validate():
    names = sorted(p.stem for p in CONFIGS.glob("*.toml"))
    assert {"fig1_training_curves", "fig2_wor_distribution", "fig3_regression_wr", "fig4_fluctuations",
            "fig5_earthquake", "fig6_posterior"} <= set(names)
    for p in CONFIGS.glob("*.toml"):
        if "mnist" in p.stem:
            continue
        experiments.load_config(p)


def test_posterior_config_emits_kl_table(tmp_path):
    out = tmp_path / "fig6"
    rc = cli.main(["run", "--config", str(CONFIGS / "fig6_posterior.toml"), "--out", str(out), "--workers", "1"])
    assert rc == 0
    with open(out / "kl_vs_eta.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["eta", "kl_sgld", "kl_sgworld", "kl_sgworld_uncorrected"]
    assert len(rows) == 6
    summary = json.loads((out / "summary.json").read_text())
    for key in ("config_hash", "code_version", "seeds", "wall_time_s", "tolerances"):
        assert key in summary


def test_stationary_run_artifacts_and_reproducibility(tmp_path):
    cfg = _write(tmp_path, SMALL_WR)
    for out in ("a", "b"):
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / out), "--workers", "2"]) == 0
    for name in ("sigma_theory.csv", "sigma_empirical.csv", "C_theory.csv", "C_empirical.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        A, head = io.read_matrix_csv(tmp_path / "a" / name)
        assert A.shape == (7, 7) and head["rows"] == "7"
    rep = json.loads((tmp_path / "a" / "fluctuations.json").read_text())
    assert rep["records"] > 0
    # a different seed changes the empirical matrices
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "c"), "--seed-override", "99",
                     "--workers", "1"]) == 0
    assert (tmp_path / "c" / "sigma_empirical.csv").read_bytes() != (tmp_path / "a" / "sigma_empirical.csv").read_bytes()


def test_report_reads_summary(tmp_path, capsys):
    out = tmp_path / "o"
    cli.main(["run", "--config", str(CONFIGS / "fig6_posterior.toml"), "--out", str(out), "--workers", "1"])
    capsys.readouterr()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert "fig6_posterior" in capsys.readouterr().out
    assert cli.main(["report", "--out", str(tmp_path / "missing")]) == 2


@pytest.mark.parametrize("text", [
    "this is not toml [",
    SMALL_WR.replace('kind = "stationary"', 'kind = "dance"'),
    SMALL_WR.replace("m = 10", "m = 0"),
    SMALL_WR + "\n[extra]\nx = 1\n",
    SMALL_WR.replace("seed = 4", "seed = 4\nwobble = 2"),
    SMALL_WR.replace('modes = ["sgd-wr"]', 'modes = ["sgd-wor"]').replace("m = 10", "m = 7"),
])
def test_malformed_config_exit_2_without_artifacts(tmp_path, text):
    out = tmp_path / "never"
    assert cli.main(["run", "--config", _write(tmp_path, text), "--out", str(out)]) == 2
    assert not out.exists()


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.toml")]) == 2
    assert cli.main(["run"]) == 2


def test_divergence_exit_3(tmp_path):
    text = SMALL_WR.replace("eta = 1e-7", "eta = 1e-1").replace("steps = 30_000", "steps = 20_000")
    out = tmp_path / "div"
    assert cli.main(["run", "--config", _write(tmp_path, text), "--out", str(out), "--workers", "1"]) == 3
    assert not out.exists()


def test_capability_exit_4(tmp_path, monkeypatch):
    def refuse(*args, **kwargs):
        raise CapabilityError("per-sample Hessians unavailable")

    monkeypatch.setattr(experiments, "run_experiment", refuse)
    assert cli.main(["run", "--config", _write(tmp_path, SMALL_WR)]) == 4


def test_mnist_location_from_env(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    models.write_idx_images(tmp_path / "train-images-idx3-ubyte", rng.integers(0, 256, (300, 28, 28)))
    models.write_idx_labels(tmp_path / "train-labels-idx1-ubyte", rng.integers(0, 10, 300))
    monkeypatch.setenv("SGDTHERMO_DATA_DIR", str(tmp_path))
    text = (CONFIGS / "fig3_mnist.toml").read_text()
    cfg = experiments.parse_config(text)
    model, data = experiments.build_problem(cfg.model)
    assert data.M == 300 and model.N == 490
    monkeypatch.setenv("SGDTHERMO_DATA_DIR", str(tmp_path / "empty"))
    with pytest.raises(InvalidArgument):
        experiments.parse_config(text)


def test_oracle_command(tmp_path, capsys):
    assert cli.main(["oracle", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "oracle.json").read_text())
    assert report["passed"] and all(c["pass"] for c in report["checks"])
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["failed"] == 0


def test_oracle_negative_control_names_coefficient():
    report = run_suite(coefficient_override={"a2": 1e-6})
    assert not report["passed"]
    failed = {c["coefficient"] for c in report["checks"] if not c["pass"]}
    assert failed == {"a2"}
