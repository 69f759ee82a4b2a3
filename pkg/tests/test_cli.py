import csv
import io
import json

import pytest

from rsfbsde import config as C
from rsfbsde.cli import dumps, main, run


def _out(capsys):
    return json.loads(capsys.readouterr().out)


class TestConfigErrors:
    def test_nonpositive_theta(self, capsys):
        assert main(["risk-equivalence", "--model", "gaussian", "--theta", "-1"]) == 2
        assert "theta" in _out(capsys)["error"]["message"]

    def test_unknown_key(self, capsys):
        assert main(["simulate", "--model", "gaussian", "--set", "ensemble.bogus=3"]) == 2
        assert _out(capsys)["error"]["type"] == "ConfigError"

    def test_unknown_model(self, capsys):
        assert main(["simulate", "--model", "no-such-model"]) == 2

    def test_missing_model(self, capsys):
        assert main(["simulate"]) == 2

    def test_kind_mismatch(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("kind: solve\nmodel:\n  name: gaussian\n")
        assert main(["simulate", "--config", str(p)]) == 2

    def test_bad_yaml(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("kind: [unclosed\n")
        assert main(["simulate", "--config", str(p)]) == 2

    def test_invest_needs_invest_model(self, capsys):
        assert main(["invest", "--model", "gaussian", "--n-paths", "10"]) == 2


def test_list_models_json(capsys):
    assert main(["list-models"]) == 0
    ms = json.loads(capsys.readouterr().out)
    names = {m["name"] for m in ms}
    assert {"gaussian", "coupled-linear", "lq-exp", "invest", "filter-linear", "linear-test"} <= names


def test_list_models_csv(capsys):
    assert main(["list-models", "--format", "csv"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["name", "origin", "description"]
    assert len(rows) > 5


def test_spike_single_control(capsys):
    code = main(["spike", "--model", "linear-test", "--param", "U=[0.0]", "--param", "n_steps=64",
                 "--n-paths", "300", "--seed", "2"])
    s = _out(capsys)
    assert code == 0
    assert all(r["dJ"] == 0.0 for r in s["results"]["rows"])


def test_risk_equivalence_linear_test(capsys):
    code = main(["risk-equivalence", "--model", "linear-test", "--n-paths", "4000", "--seed", "3"])
    s = _out(capsys)
    assert code == 0 and s["status"] == "pass"


def test_bmo_constant_zero(capsys):
    code = main(["solve", "--model", "gaussian", "--param", "sigma=0.0", "--param", "n_steps=20",
                 "--n-paths", "200"])
    s = _out(capsys)
    assert code == 0
    assert s["results"]["zeta0_stderr"] == 0.0


def test_reproducible_bytes():
    d = {"kind": "simulate", "model": {"name": "lq-exp", "params": {"n_steps": 40}},
         "ensemble": {"n_paths": 500, "seed": 9}}
    a = dumps(run(C.validate(d))[0])
    b = dumps(run(C.validate(d))[0])
    assert a == b
    d["ensemble"]["seed"] = 10
    assert dumps(run(C.validate(d))[0]) != a


def test_out_directory(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["simulate", "--model", "gaussian", "--param", "n_steps=20", "--n-paths", "300",
                 "--out", str(out), "--quiet"])
    assert capsys.readouterr().out == ""
    s = json.loads((out / "summary.json").read_text())
    assert s["exit_code"] == code
    assert s["config"]["model"]["name"] == "gaussian"
    assert (out / "paths.csv").exists()


def test_yaml_config_roundtrip(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("kind: mp-check\nmodel:\n  name: linear-test\n  params:\n    U: [0.0]\n    n_steps: 40\n"
                 "ensemble:\n  n_paths: 300\n  seed: 1\npolicy:\n  kind: constant\n  value: 0.0\n")
    assert main(["mp-check", "--config", str(p)]) == 0
    s = _out(capsys)
    assert s["checks"]["optimal_condition"]
