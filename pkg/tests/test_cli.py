import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from cencov import MeanSpec, __version__
from cencov.cli import main, read_csv_data, write_csv_data
from cencov.estimators import EstimatorSpec, fit_estimator
from cencov.simulation import bundled_scenario, generate_dataset, known_nuisance

TTE = {"form": "time_to_event", "age_column": 0}


def _schema(name):
    return json.loads(resources.files("cencov.schemas").joinpath(name).read_text())


@pytest.fixture
def dataset(tmp_path):
    sc = bundled_scenario("ind_known").with_updates(n=600)
    sim = generate_dataset(sc, 0)
    path = tmp_path / "data.csv"
    write_csv_data(sim.data, path, ["age", "z1"])
    return sc, sim, path


def _known_block(sc):
    nu = known_nuisance(sc)
    return {"mode": "known", "x_given_z": nu.x_given_z.to_dict(), "c_dist": nu.c_dist.to_dict(),
            "outcome_theta": list(nu.outcome_theta)}


def _run(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    cfg.setdefault("output", "out.json")
    path.write_text(json.dumps(cfg))
    code = main(["fit", "--config", str(path)])
    out = tmp_path / cfg["output"]
    return code, json.loads(out.read_text()) if out.exists() else None


def test_csv_round_trip_is_exact(dataset, tmp_path):
    sc, sim, path = dataset
    data, names, has_age = read_csv_data(path)
    assert names == ["age", "z1"] and has_age
    for attr in ("y", "w", "delta", "z"):
        np.testing.assert_array_equal(getattr(data, attr), getattr(sim.data, attr))


def test_fit_reproduces_in_process_result_bit_exactly(dataset, tmp_path):
    sc, sim, path = dataset
    cfg = {"input": str(path), "estimator": {"kind": "AIPW", "psi_mode": "effective", "mean": TTE},
           "nuisance": _known_block(sc)}
    code, doc = _run(tmp_path, cfg)
    assert code == 0 and doc["status"] == "converged"
    ref = fit_estimator(EstimatorSpec("AIPW", psi_mode="effective", mean=MeanSpec.time_to_event(0)),
                        sim.data, known_nuisance(sc))
    assert doc["result"]["theta_hat"] == ref.theta_hat.tolist()
    assert doc["result"]["se"] == ref.se.tolist()
    jsonschema.validate(doc, _schema("fit_result.schema.json"))


def test_complete_case_recovers_truth(dataset, tmp_path, capsys):
    sc, sim, path = dataset
    code, doc = _run(tmp_path, {"input": str(path), "estimator": {"kind": "CC"}})
    assert code == 0
    theta, se = np.array(doc["result"]["theta_hat"]), np.array(doc["result"]["se"])
    assert np.all(np.abs(theta[:3] - [1, 3, 2]) < 4 * se[:3])
    assert doc["coefficients"][1] == "beta_x (age - x)"
    assert np.all(np.array(doc["ci95"])[:, 0] < theta)
    assert "beta0" in capsys.readouterr().out


def test_estimated_nuisance_fit(dataset, tmp_path):
    sc, sim, path = dataset
    cfg = {"input": str(path), "estimator": {"kind": "MACC", "lambda_mode": "nuisance_adjusted"},
           "nuisance": {"mode": "estimate", "x_columns": [1], "c_columns": [1]}}
    code, doc = _run(tmp_path, cfg)
    assert code == 0
    assert doc["nuisance"]["provenance"]["x_given_z"] == "estimated"
    assert doc["result"]["se_uncorrected"] is not None
    jsonschema.validate(doc, _schema("fit_result.schema.json"))


def test_missing_column_exits_2_naming_it(tmp_path, capsys):
    path = tmp_path / "d.csv"
    path.write_text("y,w,z1\n1.0,0.5,0.2\n")
    code, doc = _run(tmp_path, {"input": str(path), "estimator": {"kind": "CC"}})
    assert code == 2 and doc is None
    assert "'delta'" in capsys.readouterr().err


def test_forbidden_combination_exits_2(tmp_path, capsys):
    path = tmp_path / "m.csv"
    path.write_text("y,x,r,z1\n1.0,0.5,1,0.2\n2.0,,0,0.1\n")
    cfg = {"input": str(path), "estimator": {"kind": "MLE", "problem": "miss", "dependence": "dep"}}
    code, _ = _run(tmp_path, cfg)
    assert code == 2
    assert "dependent missingness" in capsys.readouterr().err


def test_missing_layout_rejects_x_when_unobserved(tmp_path, capsys):
    path = tmp_path / "m.csv"
    path.write_text("y,x,r,z1\n1.0,0.5,0,0.2\n")
    code, _ = _run(tmp_path, {"input": str(path), "layout": "missing", "estimator": {"kind": "CC"}})
    assert code == 2 and "blank" in capsys.readouterr().err


def test_non_numeric_field_exits_2(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,w,delta,z1\n1.0,abc,1,0.2\n")
    code, _ = _run(tmp_path, {"input": str(path), "estimator": {"kind": "CC"}})
    assert code == 2


def test_non_convergence_exits_3_with_diagnostics(dataset, tmp_path):
    sc, sim, path = dataset
    cfg = {"input": str(path), "estimator": {"kind": "MLE", "mean": TTE},
           "nuisance": _known_block(sc), "solver": {"max_iter": 1}}
    code, doc = _run(tmp_path, cfg)
    assert code == 3
    assert doc["status"] == "not_converged"
    assert doc["diagnostics"]["iterations"] >= 1 and len(doc["diagnostics"]["last"]) == 4
    jsonschema.validate(doc, _schema("fit_result.schema.json"))


def test_bad_config_exits_2(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{broken")
    assert main(["fit", "--config", str(path)]) == 2
    assert main(["fit"]) == 2
    assert main(["nonsense"]) == 2


def test_simulate_is_deterministic_and_schema_valid(tmp_path, capsys):
    sc = bundled_scenario("bartlett").with_updates(replications=3)
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(sc.to_dict()))
    assert main(["simulate", "--scenario", str(path), "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--scenario", str(path), "--out-dir", str(tmp_path / "b"),
                 "--threads", "2"]) == 0
    a = (tmp_path / "a" / "bartlett_summary.csv").read_bytes()
    assert a == (tmp_path / "b" / "bartlett_summary.csv").read_bytes()
    doc = json.loads((tmp_path / "a" / "bartlett_summary.json").read_text())
    jsonschema.validate(doc, _schema("simulation_summary.schema.json"))
    assert doc["seed"] == sc.master_seed
    assert "ACC-Lambda" in capsys.readouterr().out


def test_simulate_single_replication_has_blank_sd(tmp_path):
    code = main(["simulate", "--scenario", "bartlett", "--replications", "1",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "bartlett_summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 4 and all(r["SD"] == "" for r in rows)
    doc = json.loads((tmp_path / "bartlett_summary.json").read_text())
    assert all(r["sd"][0] is None for r in doc["rows"])


def test_simulate_invalid_scenario_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "x"}')
    assert main(["simulate", "--scenario", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["simulate", "--scenario", "no_such_scenario", "--out-dir", str(tmp_path)]) == 2


def test_simulate_failure_cap_exits_4(tmp_path):
    d = bundled_scenario("ind_known").to_dict()
    d.update(n=100, replications=2, mvn={"mean": [0, 60, 0], "cov": d["mvn"]["cov"]},
             estimators=[{"label": "MACC", "kind": "MACC", "psi_mode": "effective"}])
    path = tmp_path / "cap.json"
    path.write_text(json.dumps(d))
    assert main(["simulate", "--scenario", str(path), "--out-dir", str(tmp_path)]) == 4


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__
