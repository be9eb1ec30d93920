import csv
import io
import json
from pathlib import Path

import pytest

from brwconc import cli
from brwconc.errors import ConfigError, MissingOutput
from brwconc.experiments import (ExperimentConfig, RunManifest, emit_plot_data, list_models,
                                 load_config, run_experiment)

RW_TOML = """
pipeline = "simulate-rw"
seed = 20240601

[scale]
N = 100
n = 100

[engine]
trials = 20000

[lambda]
values = [10, 20, 30]
units = "absolute"
center = "zero"

[bounds]
kinds = ["azuma_classic", "extended"]
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def rw_config(tmp_path):
    p = tmp_path / "rw.toml"
    p.write_text(RW_TOML)
    return p


def test_rademacher_run_has_three_rows_without_violations(rw_config, tmp_path):
    man = run_experiment(load_config(rw_config), out=tmp_path / "runs")
    rows = _rows(Path(man.run_dir) / "tail.csv")
    assert [float(r["lambda"]) for r in rows] == [10.0, 20.0, 30.0]
    assert all(r["violated"] == "false" for r in rows)
    assert man.violations == 0
    assert {"K", "L", "envelope", "c_choice"} <= set(man.measured)


def test_manifest_rerun_is_byte_identical(rw_config, tmp_path):
    man = run_experiment(load_config(rw_config), out=tmp_path / "runs")
    again = run_experiment(load_config(Path(man.run_dir) / "manifest.json"),
                           out=tmp_path / "runs")
    assert again.run_dir != man.run_dir
    assert again.outputs == man.outputs
    for name in man.outputs:
        assert (Path(man.run_dir) / name).read_bytes() == (Path(again.run_dir) / name).read_bytes()


def test_worker_count_does_not_change_outputs(tmp_path):
    base = {"pipeline": "simulate-rw", "scale": {"N": 50, "n": 20},
            "engine": {"trials": 70_000}, "lambda": {"values": [1.0]}}
    a = run_experiment(dict(base, workers=1), out=tmp_path)
    b = run_experiment(dict(base, workers=2), out=tmp_path)
    assert a.outputs == b.outputs


def test_n_above_m_is_a_config_error():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_mapping({"scale": {"N": 100, "n": 50, "M": 20}})
    assert "M" in str(exc.value) or "n" in str(exc.value)


@pytest.mark.parametrize("bad, field", [
    ({"seed": -1}, "seed"),
    ({"workers": 0}, "workers"),
    ({"pipeline": "nope"}, "pipeline"),
    ({"lambda": {"values": []}}, "lambda.values"),
    ({"lambda": {"units": "furlongs"}}, "lambda.units"),
    ({"bounds": {"kinds": ["wrong"]}}, "bounds.kinds"),
    ({"engine": {"colour": 1}}, "engine.colour"),
    ({"model": {"displacement": "nope"}}, "model"),
])
def test_config_errors_name_the_field(bad, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_mapping(bad)
    assert field in str(exc.value)


def test_config_round_trip():
    cfg = ExperimentConfig.from_mapping({"scale": {"N": 30, "n": 10}})
    again = ExperimentConfig.from_mapping(json.loads(json.dumps(cfg.to_dict())))
    assert again.digest() == cfg.digest()


def test_list_models_catalog():
    cat = {r["id"]: r for r in list_models()}
    assert "K" in cat["ksat_like"]["params"]
    assert "delta" in cat["scatter"]["params"]
    for entry in cat.values():
        assert {"role", "params", "domain", "kinks", "kink_window"} <= set(entry)


def test_plot_data_for_tail_run(rw_config, tmp_path):
    man = run_experiment(load_config(rw_config), out=tmp_path)
    path, _ = emit_plot_data(man)
    series = {r["series"] for r in _rows(path)}
    assert series == {"empirical", "extended_bound", "azuma_classic"}


def test_plot_data_for_recurrence_run(tmp_path):
    man = run_experiment({"pipeline": "recurrence",
                          "model": {"displacement": "biased_drift", "u0": 0.1,
                                    "displacement_params": {"kappa": 1.0}},
                          "scale": {"N": 200, "n": 100},
                          "recurrence": {"mc_trials": 2000}}, out=tmp_path)
    path, _ = emit_plot_data(Path(man.run_dir))
    series = {r["series"] for r in _rows(path)}
    assert series == {"var_recurrence", "var_closed_form", "var_monte_carlo"}


def test_plot_data_without_rows_is_missing_output(rw_config, tmp_path):
    man = run_experiment(load_config(rw_config), out=tmp_path)
    tail = Path(man.run_dir) / "tail.csv"
    tail.write_text(tail.read_text().splitlines()[0] + "\n")
    with pytest.raises(MissingOutput):
        emit_plot_data(man)
    with pytest.raises(MissingOutput):
        RunManifest.load(tmp_path / "absent")


@pytest.mark.parametrize("pipeline, extra, output", [
    ("bounds", {"bounds": {"kinds": ["azuma_classic", "extended", "neighborhood"],
                           "K": 2.0, "L": 1.0}}, "bounds.csv"),
    ("simulate-brw", {"model": {"branching": "ksat_like", "u0": 0.1,
                                "branching_params": {"K": 2}},
                      "scale": {"N": 10, "n": 8, "M": 8},
                      "lambda": {"values": [0.5, 1.0]},
                      "engine": {"kind": "population", "cap": 1000, "replicates": 2}},
     "population.csv"),
    ("probe-lipschitz", {"engine": {"trials": 2000}}, "lipschitz.csv"),
    ("probe-doob", {"probe": {"sub_trials": 200, "indices": 3}}, "doob.csv"),
    ("test-association", {"model": {"displacement": "gaussian", "branching": "squeeze"},
                          "scale": {"N": 100, "n": 5, "M": 5},
                          "engine": {"trials": 2000}}, "association.csv"),
])
def test_every_pipeline_writes_its_table(pipeline, extra, output, tmp_path):
    cfg = {"pipeline": pipeline, "scale": {"N": 50, "n": 20}, "engine": {"trials": 2000}}
    for k, v in extra.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    man = run_experiment(cfg, out=tmp_path)
    assert output in man.outputs
    assert len(_rows(Path(man.run_dir) / output)) >= 1
    assert (Path(man.run_dir) / "manifest.json").exists()


# command line


def test_cli_simulate_rw(rw_config, tmp_path):
    buf = io.StringIO()
    code = cli.main(["simulate-rw", "--config", str(rw_config), "--out", str(tmp_path),
                     "--verify"], out=buf)
    assert code == 0
    assert "lambda,hits,trials" in buf.getvalue()


def test_cli_json_manifest(rw_config, tmp_path):
    buf = io.StringIO()
    code = cli.main(["simulate-rw", "--config", str(rw_config), "--out", str(tmp_path),
                     "--seed", "5", "--format", "json"], out=buf)
    assert code == 0
    man = json.loads(buf.getvalue())
    assert man["config"]["seed"] == 5 and "tail.csv" in man["outputs"]


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[scale]\nN = 100\nn = 50\nM = 20\n")
    assert cli.main(["simulate-rw", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_cli_engine_error_exit_code(tmp_path):
    cfg = tmp_path / "deg.toml"
    cfg.write_text('[model]\nbranching = "ksat_like"\nu0 = 0.5\n[model.branching_params]\nK = 2\n'
                   "[scale]\nN = 10\nn = 60\nM = 60\n[engine]\ntrials = 200\n"
                   "ess_floor = 150\n[lambda]\nvalues = [1.0]\n")
    assert cli.main(["simulate-brw", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_cli_violation_exit_code(tmp_path):
    cfg = tmp_path / "stated.toml"
    # a wrong increment bound makes the classic bound too small to hold
    cfg.write_text(RW_TOML.replace('kinds = ["azuma_classic", "extended"]',
                                   'kinds = ["azuma_classic"]\nincrement_bound = 0.1'))
    assert cli.main(["simulate-rw", "--config", str(cfg), "--out", str(tmp_path)],
                    out=io.StringIO()) == 0
    assert cli.main(["simulate-rw", "--config", str(cfg), "--out", str(tmp_path), "--verify"],
                    out=io.StringIO()) == 4


def test_cli_list_models():
    buf = io.StringIO()
    assert cli.main(["list-models"], out=buf) == 0
    ids = [r["id"] for r in csv.DictReader(io.StringIO(buf.getvalue()))]
    assert "ksat_like" in ids and "scatter" in ids
    buf = io.StringIO()
    assert cli.main(["list-models", "--format", "json"], out=buf) == 0
    assert any(r["id"] == "scatter" for r in json.loads(buf.getvalue()))


def test_cli_emit_plot_data(rw_config, tmp_path):
    man = run_experiment(load_config(rw_config), out=tmp_path)
    buf = io.StringIO()
    assert cli.main(["emit-plot-data", man.run_dir], out=buf) == 0
    assert buf.getvalue().startswith("series,x,y,y_low,y_high")
    assert cli.main(["emit-plot-data", str(tmp_path / "missing")]) == 3
