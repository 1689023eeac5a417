import csv
import json
import math

import pytest

from tvslab.analytic import LAMBDA
from tvslab.cli import main, run, sweep
from tvslab.experiments import ConfigError, ExperimentConfig, Runner, load_config, parse_value, validate


def test_parse_values():
    assert parse_value("a", "2lambda") == pytest.approx(2 * LAMBDA)
    assert parse_value("a", "lambda") == pytest.approx(LAMBDA)
    assert parse_value("z", "0.1+0.2i") == 0.1 + 0.2j
    assert parse_value("lattice_n", "64") == 64
    with pytest.raises(ConfigError):
        parse_value("bogus", "1")
    with pytest.raises(ConfigError):
        parse_value("sigma", "abc")


def test_load_config_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nexperiment = covariance\na = 2lambda  # inline\nb=2lambda\nlattice_n = 64\n")
    cfg = load_config(str(path), ["seed=7"])
    assert cfg.experiment == "covariance" and cfg.seed == 7 and cfg.lattice_n == 64
    assert cfg.a == pytest.approx(2 * LAMBDA)
    path.write_text("nonsense line\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


@pytest.mark.parametrize(
    "changes",
    [
        {"experiment": "nope"},
        {"a": 0.5, "b": 0.5},
        {"lattice_n": 33},
        {"lattice_n": 4096},
        {"sigma": 1.5},
        {"lattice_n": 64, "eps": 0.01},
        {"experiment": "minkowski", "delta": 2.0},
        {"samples": 0},
        {"experiment": "conditional-one-point", "sigma": 1.0},
        {"experiment": "conditional-three-point", "a": LAMBDA, "b": 3 * LAMBDA, "sigma": 0.1},
        {"experiment": "dimension", "lattice_n": 64},
        {"z": 1.2 + 0j},
        {"experiment": "covariance", "lattice_n": 32},
        {"edge_rule": "cubic"},
    ],
)
def test_validate_rejects(changes):
    with pytest.raises(ConfigError):
        validate(ExperimentConfig(**changes))


def test_exit_codes(tmp_path, capsys):
    out = tmp_path / "lemma"
    assert main(["run", "--set", "experiment=content-lemma", "--set", f"output_path={out}"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["passed"] and rep["status"] == "ok"
    assert rep["config"]["experiment"] == "content-lemma"
    with open(out / "rows.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and rows[0]["passed"] == "True"
    assert main(["run", "--set", "experiment=bogus"]) == 2
    assert "valid:" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["sweep", "--axis", "colour", "--values", "1,2", "--set", "experiment=content-lemma"]) == 2


def test_failing_rule_exit_code(tmp_path):
    # tiny lattice and few samples: the covariance check is expected to run and report
    out = tmp_path / "cov"
    code = main(["run", "--set", "experiment=covariance", "--set", "lattice_n=64", "--set", "samples=50",
                 "--set", f"output_path={out}"])
    rep = json.loads((out / "report.json").read_text())
    assert code == (0 if rep["passed"] else 1)


def small_cov(tmp_path, name, seed=3):
    return ExperimentConfig(experiment="covariance", lattice_n=64, samples=60, seed=seed, output_path=str(tmp_path / name))


def test_determinism_across_workers(tmp_path, monkeypatch):
    r1 = run(small_cov(tmp_path, "one"), Runner(1))
    r2 = run(small_cov(tmp_path, "two"), Runner(2))
    monkeypatch.setenv("TVSLAB_THREADS", "3")
    r3 = run(small_cov(tmp_path, "three"))
    for a, b, c in zip(r1["rows"], r2["rows"], r3["rows"]):
        assert a["estimate"] == b["estimate"] == c["estimate"]
        assert a["se"] == b["se"]


def test_sweep_merges(tmp_path):
    cfg = small_cov(tmp_path, "sweep")
    reports = sweep(cfg, "lattice_n", ["64", "80"], Runner(1))
    assert [r["config"]["seed"] for r in reports] == [3, 4]
    with open(tmp_path / "sweep" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["lattice_n"] for r in rows} == {"64", "80"}
    assert all(math.isfinite(float(r["estimate"])) for r in rows)
    with pytest.raises(ConfigError):
        sweep(cfg, "lattice_n", [], Runner(1))
