import json

import numpy as np
import pytest

from idm import cli, harness
from idm.errors import CapabilityError, InvalidArgumentError

GM = {
    "experiment": "interval",
    "dgp": {"kind": "gaussian_mean", "n": 100, "seed": 3},
    "optimizer": {"convergence_tol": 1e-10},
    "idm": {"lambda": 1.0},
    "baselines": {"delta": True, "bootstrap": {"B": 400, "seed": 1}, "simulation": {"R": 400, "seed": 2}},
}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# ----------------------------------------------------------------------------- config plumbing


def test_overrides_dotted_paths():
    doc = harness.apply_overrides({"idm": {"lambda": "auto"}}, ["idm.lambda=0.1", "sweep.grid=[1, 2]", "output=x"])
    assert doc == {"idm": {"lambda": 0.1}, "sweep": {"grid": [1, 2]}, "output": "x"}


def test_override_syntax_error():
    with pytest.raises(InvalidArgumentError):
        harness.apply_overrides({}, ["idm.lambda"])


def test_unknown_keys_rejected():
    with pytest.raises(InvalidArgumentError):
        harness.load_config(doc={"experimnt": "interval"})
    with pytest.raises(InvalidArgumentError):
        harness.load_config(doc={"idm": {"lamda": 1}})
    with pytest.raises(InvalidArgumentError):
        harness.load_config(doc={"experiment": "plot"})


def test_config_round_trip():
    cfg = harness.load_config(doc=GM)
    assert harness.ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_default_models():
    assert harness.load_config(doc={"dgp": {"kind": "logistic_class"}}).model.family.name == "bernoulli_logit"
    assert harness.load_config(doc={"dgp": {"kind": "quadratic"}}).model.predictor.hidden == (50,)


# ----------------------------------------------------------------------------- interval


def test_gaussian_mean_all_methods_agree():
    report = harness.run(harness.load_config(doc=GM))
    var = {row["method"]: row["variance"] for row in report["rows"]}
    assert set(var) == {"fdidm", "delta", "bootstrap", "simulation"}
    assert var["fdidm"] == pytest.approx(0.01, rel=1e-6)
    assert var["delta"] == pytest.approx(0.01, rel=1e-6)
    assert var["bootstrap"] == pytest.approx(0.01, rel=0.25)
    assert var["simulation"] == pytest.approx(0.01, rel=0.25)


def test_auto_lambda_echoed():
    doc = dict(GM, idm={"lambda": "auto"}, baselines={})
    report = harness.run(harness.load_config(doc=doc))
    lam = report["config"]["idm"]["lambda"]
    assert isinstance(lam, float) and lam == report["methods"]["fdidm"]["lambda"]


def test_interval_multiplier():
    report = harness.run(harness.load_config(doc=dict(GM, baselines={})))
    row = report["rows"][0]
    half = (row["hi"] - row["lo"]) / 2
    assert half / np.sqrt(row["variance"]) == pytest.approx(1.959964, abs=1e-6)


# ----------------------------------------------------------------------------- coverage and sweeps


def test_coverage_report_schema():
    doc = {"experiment": "coverage", "dgp": {"kind": "gaussian_mean", "n": 20}, "idm": {"lambda": 1.0, "beta": 0.5},
           "sweep": {"R": 20}}
    report = harness.run(harness.load_config(doc=doc))
    (row,) = report["rows"]
    assert row["hits"] <= row["replicates"] == 20
    assert row["coverage"] == row["hits"] / row["replicates"]
    assert report["aggregate"]["coverage"] == row["coverage"]


def test_convergence_row_count():
    doc = {"experiment": "convergence", "dgp": {"kind": "gaussian_mean"}, "baselines": {"delta": True},
           "sweep": {"R": 5, "n_values": [10, 20, 40], "lambdas": [0.1, 1.0]}}
    report = harness.run(harness.load_config(doc=doc))
    assert len(report["rows"]) == 3 * 2 + 3
    for row in report["rows"]:
        assert row["mse_n2"] >= 0 and row["se_n2"] >= 0


def test_runtime_fit_counts():
    doc = {"experiment": "runtime", "dgp": {"kind": "logistic_class", "n": 500, "d": 3},
           "idm": {"lambda": 1.0}, "baselines": {"bootstrap": {"B": 10}}}
    rows = harness.run(harness.load_config(doc=doc))["rows"]
    assert [(r["method"], r["fit_count"]) for r in rows] == [("fdidm", 2), ("bootstrap", 10)]


def test_runtime_multivariate_fit_count():
    doc = {"experiment": "runtime", "dgp": {"kind": "logistic_class", "n": 300, "d": 2},
           "eval": {"kind": "prediction_grid", "points": [[-1.0], [0.0], [1.0]]},
           "idm": {"lambda": 1.0}, "baselines": {"bootstrap": {"B": 5}}}
    rows = harness.run(harness.load_config(doc=doc))["rows"]
    assert rows[0]["fit_count"] == 4


def test_fisher_gaussian_mean():
    doc = {"experiment": "fisher", "dgp": {"kind": "gaussian_mean", "n": 50},
           "optimizer": {"convergence_tol": 1e-12}}
    report = harness.run(harness.load_config(doc=doc))
    assert report["fisher_inverse_idm"][0][0] == pytest.approx(report["fisher_inverse_direct"][0][0], abs=1e-8)


def test_fisher_cap():
    doc = {"experiment": "fisher", "dgp": {"kind": "logistic_class", "n": 200, "d": 51}}
    with pytest.raises(CapabilityError):
        harness.run(harness.load_config(doc=doc))


# ----------------------------------------------------------------------------- CLI


def test_cli_writes_byte_identical_outputs(tmp_path):
    path = write(tmp_path, dict(GM, baselines={"bootstrap": {"B": 20}}))
    prefix = str(tmp_path / "a")
    assert cli.main(["run", path, "--out", prefix]) == 0
    first = {ext: (tmp_path / f"a{ext}").read_bytes() for ext in (".json", ".csv")}
    assert cli.main(["run", path, "--out", prefix]) == 0
    for ext, data in first.items():
        assert (tmp_path / f"a{ext}").read_bytes() == data
    meta = json.loads((tmp_path / "a.meta.json").read_text())
    assert "started" in meta and "started" not in (tmp_path / "a.json").read_text()


def test_cli_seed_and_set_change_output(tmp_path):
    path = write(tmp_path, {"experiment": "coverage", "dgp": {"kind": "gaussian_mean", "n": 10},
                            "idm": {"lambda": 1.0}, "sweep": {"R": 10}})
    assert cli.main(["coverage", path, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert cli.main(["coverage", path, "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    assert a["config"]["root_seed"] == 1 and b["config"]["root_seed"] == 2
    assert cli.main(["coverage", path, "--out", str(tmp_path / "c"), "--set", "idm.beta=0.5"]) == 0
    assert json.loads((tmp_path / "c.json").read_text())["config"]["idm"]["beta"] == 0.5


def test_cli_subcommand_overrides_experiment(tmp_path):
    path = write(tmp_path, {"experiment": "interval", "dgp": {"kind": "gaussian_mean", "n": 30}})
    assert cli.main(["fisher", path, "--out", str(tmp_path / "f")]) == 0
    assert "frobenius_rel_error" in json.loads((tmp_path / "f.json").read_text())


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["run", write(tmp_path, {"bogus": 1})]) == 2
    assert cli.main(["run", write(tmp_path, GM), "--set", "idm.lambda=-1"]) == 2
    assert "error [config]" in capsys.readouterr().err


def test_cli_stage_failure(tmp_path, capsys):
    path = write(tmp_path, {"experiment": "fisher", "dgp": {"kind": "logistic_class", "n": 100, "d": 51}})
    assert cli.main(["run", path, "--out", str(tmp_path / "x")]) == 1
    assert "error [fisher]" in capsys.readouterr().err


def test_cli_diagnostics_exit_code(tmp_path, monkeypatch):
    path = write(tmp_path, {"dgp": {"kind": "gaussian_mean", "n": 10}})
    real = harness.run

    def flagged(cfg):
        report = real(cfg)
        report["diagnostics"] = ["raw_negative"]
        return report

    monkeypatch.setattr(harness, "run", flagged)
    assert cli.main(["run", path, "--out", str(tmp_path / "d")]) == 3
    assert cli.main(["run", path, "--out", str(tmp_path / "d"), "--allow-diagnostics"]) == 0


def test_threads_env(monkeypatch):
    monkeypatch.setenv("IDM_THREADS", "1")
    assert harness.worker_count() == 1
    monkeypatch.setenv("IDM_THREADS", "many")
    with pytest.raises(InvalidArgumentError):
        harness.worker_count()
