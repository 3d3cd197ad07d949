import csv
import json
import os

import click
import numpy as np
import pytest

from artifacts import error_record, format_value, manifest_path
from commands import Table, run_experiment, state_param
from errors import BlowUpError, ConfigError, PreconditionError
from server import create_app
from utils.config_loader import load_config, read_json, resolve_system
from services import model_service

KINETIC = {"preset": "kinetic_fp"}


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- Config loading ---

def test_load_config_merges_defaults(write_config, tmp_path):
    path = write_config({"command": "simulate", "system": KINETIC, "params": {"T": 2.0}, "seed": 9})
    config = load_config("simulate", path, {"dt": 0.05, "T": None}, out=str(tmp_path / "a.csv"))
    assert config.params["T"] == 2.0 and config.params["dt"] == 0.05
    assert config.params["index"] == 0
    assert config.seed == 9 and config.threads >= 1


@pytest.mark.parametrize("data, message", [
    ({"system": KINETIC, "colour": "blue"}, "unknown config keys"),
    ({"system": KINETIC, "params": {"steps": 3}}, "unknown params"),
    ({"system": KINETIC, "seed": -1}, "unsigned"),
    ({"command": "exp-moment", "system": KINETIC}, "not 'simulate'"),
    ({}, "needs a system"),
])
def test_load_config_rejects(write_config, tmp_path, data, message):
    with pytest.raises(ConfigError, match=message):
        load_config("simulate", write_config(data), out=str(tmp_path / "a.csv"))


@pytest.mark.parametrize("params, message", [
    ({"dt": "abc"}, "must be float"),
    ({"T": True}, "must be float"),
    ({"index": 1.5}, "must be an integer"),
    ({"start": [0.0, "y"]}, "finite numbers"),
    ({"start": 3.0}, "must be list"),
])
def test_load_config_checks_param_types(write_config, tmp_path, params, message):
    path = write_config({"system": KINETIC, "params": params})
    with pytest.raises(ConfigError, match=message):
        load_config("simulate", path, out=str(tmp_path / "a.csv"))


def test_load_config_normalises_numbers(write_config, tmp_path):
    path = write_config({"system": KINETIC, "params": {"T": 2, "index": 3.0, "start": [1, 0]}})
    params = load_config("simulate", path, out=str(tmp_path / "a.csv")).params
    assert isinstance(params["T"], float) and params["T"] == 2.0
    assert isinstance(params["index"], int) and params["index"] == 3
    assert params["start"] == [1.0, 0.0]


def test_load_config_needs_out(write_config):
    with pytest.raises(ConfigError):
        load_config("simulate", write_config({"system": KINETIC}))


def test_read_json_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        read_json(str(bad))
    with pytest.raises(ConfigError):
        read_json(str(tmp_path / "missing.json"))


def test_read_json_unwraps_manifest(write_config):
    path = write_config({"config": {"command": "simulate", "seed": 3}, "toolkit_version": "0.1.0"})
    assert read_json(path) == {"command": "simulate", "seed": 3}


def test_resolve_system_wraps_preset_errors():
    assert resolve_system(model_service, None) is None
    assert resolve_system(model_service, KINETIC).name == "kinetic_fp"
    with pytest.raises(ConfigError):
        resolve_system(model_service, {"preset": "nope"})
    with pytest.raises(ConfigError):
        resolve_system(model_service, {"preset": "kinetic_fp", "params": {"d": 1}, "extra": 1})


def test_state_param_checks_shape():
    np.testing.assert_array_equal(state_param(None, 2, np.zeros(2), "xi"), [0.0, 0.0])
    with pytest.raises(ConfigError):
        state_param([1.0], 2, np.zeros(2), "xi")


# --- Artifacts ---

def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "true"
    assert format_value(0.1) == "0.1"
    assert format_value(np.float64(1.5)) == "1.5"
    assert format_value(np.int64(3)) == "3"
    assert format_value({"b": np.array([1.0]), "a": 1}) == '{"a": 1, "b": [1.0]}'


def test_error_record_status():
    assert error_record("simulate", ConfigError("x"))["status"] == "config_error"
    assert error_record("simulate", PreconditionError("x"))["status"] == "config_error"
    record = error_record("simulate", BlowUpError(7))
    assert record["status"] == "numerical_failure" and record["error_type"] == "BlowUpError"


def test_failed_audit_exits_four(write_config, tmp_path):
    path = write_config({"system": KINETIC})
    out = str(tmp_path / "t.csv")

    def body(config, spec):
        return Table(("a",), [[1]], ["demo_audit"])

    with click.Context(click.Command("t")):
        with pytest.raises(click.exceptions.Exit) as info:
            run_experiment("simulate", body, path, {}, None, out, 1)
    assert info.value.exit_code == 4
    assert read_rows(out) == [{"a": "1"}]


# --- CLI ---

def test_create_app_registers_every_command():
    app = create_app({"TESTING": True, "HAMLAB_LOG_LEVEL": "DEBUG"})
    assert app.config["HAMLAB_LOG_LEVEL"] == "DEBUG"
    assert {"check-conditions", "simulate", "coupling-demo", "estimate-stationary", "estimate-decay",
            "exp-moment", "harnack-audit", "operator-lab", "list-presets"} <= set(app.cli.commands)


def test_list_presets(runner):
    result = runner.invoke(args=["list-presets"])
    assert result.exit_code == 0
    lines = {line.split()[0]: line for line in result.output.splitlines() if line and not line[0].isspace()}
    for name, source in (("kinetic_fp", "Example 5.1"), ("kinetic_gradient", "Example 5.1"),
                         ("chain", "Example 5.2"), ("galerkin", "Example 5.3")):
        assert source in lines[name]


def test_check_conditions_kinetic(runner, write_config, tmp_path):
    out = str(tmp_path / "conditions.csv")
    result = runner.invoke(args=["check-conditions", "--config", write_config({"system": KINETIC}),
                                 "--n-pairs", "200", "--out", out])
    assert result.exit_code == 0, result.output
    rows = read_rows(out)
    assert list(rows[0]) == ["condition_id", "holds", "witness_name", "witness_value"]
    assert {r["holds"] for r in rows if r["condition_id"] == "C4"} == {"true"}
    with open(manifest_path(out), encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert manifest["toolkit_version"] and manifest["config"]["command"] == "check-conditions"
    assert manifest["config"]["params"]["n_pairs"] == 200


def test_unknown_key_exits_two(runner, write_config, tmp_path):
    out = str(tmp_path / "conditions.csv")
    path = write_config({"system": KINETIC, "colour": "blue"})
    result = runner.invoke(args=["check-conditions", "--config", path, "--out", out])
    assert result.exit_code == 2
    assert "config_error" in result.output
    assert not os.path.exists(out)


def test_simulate_is_reproducible(runner, write_config, tmp_path):
    path = write_config({"system": KINETIC, "seed": 42, "params": {"T": 1.0}})
    first, second, rerun = (str(tmp_path / name) for name in ("a.csv", "b.csv", "c.csv"))
    for out in (first, second):
        result = runner.invoke(args=["simulate", "--config", path, "--out", out])
        assert result.exit_code == 0, result.output
    result = runner.invoke(args=["simulate", "--config", manifest_path(first), "--out", rerun])
    assert result.exit_code == 0, result.output
    with open(first, "rb") as a, open(second, "rb") as b, open(rerun, "rb") as c:
        data = a.read()
        assert data == b.read() == c.read()
    rows = read_rows(first)
    assert len(rows) == 101 and list(rows[0]) == ["t", "x0", "y0"]


def test_coupling_demo_flags(runner, write_config, tmp_path):
    out = str(tmp_path / "coupling.csv")
    result = runner.invoke(args=["coupling-demo", "--config", write_config({"system": KINETIC}),
                                 "--paths", "50", "--t0", "1.0", "--out", out])
    assert result.exit_code == 0, result.output
    rows = read_rows(out)
    assert len(rows) == 50
    assert max(float(r["terminal_gap"]) for r in rows) < 0.05


def test_operator_lab_inline(runner, write_config, tmp_path):
    out = str(tmp_path / "operators.csv")
    operator = {"P": [[0.7, 0.3], [0.3, 0.7]], "mu": [0.5, 0.5]}
    result = runner.invoke(args=["operator-lab", "--config", write_config({"params": {"operator": operator}}),
                                 "--out", out])
    assert result.exit_code == 0, result.output
    (row,) = read_rows(out)
    assert row["n_power"] == "1" and row["gap_sq_le_bound"] == "true"
    assert row["entropy_audit_holds"] == "true"


def test_operator_lab_rejects_bad_operator(runner, write_config, tmp_path):
    operator = {"P": [[0.5, 0.6], [0.5, 0.5]], "mu": [0.5, 0.5]}
    result = runner.invoke(args=["operator-lab", "--config", write_config({"params": {"operator": operator}}),
                                 "--out", str(tmp_path / "operators.csv")])
    assert result.exit_code == 2


def test_blow_up_exits_three(runner, write_config, tmp_path):
    # dt far past the explicit Euler stability limit
    path = write_config({"system": KINETIC, "params": {"dt": 10.0, "T": 10000.0}})
    result = runner.invoke(args=["simulate", "--config", path, "--out", str(tmp_path / "s.csv")])
    assert result.exit_code == 3
    assert "numerical_failure" in result.output


def test_exp_moment_command(runner, write_config, tmp_path):
    out = str(tmp_path / "exp.csv")
    path = write_config({"system": KINETIC, "params": {"T": 5.0, "paths": 500}})
    result = runner.invoke(args=["exp-moment", "--config", path, "--eps", "0.2", "--out", out])
    assert result.exit_code == 0, result.output
    rows = read_rows(out)
    assert len(rows) == 21 and rows[-1]["name"] == "largest_safe_eps"
    assert float(rows[-1]["value"]) == 0.2
    assert json.loads(rows[-1]["meta"])["gaussian_threshold"] == pytest.approx(1.0)


def test_estimate_stationary_adds_lyapunov_rows(runner, write_config, tmp_path):
    out = str(tmp_path / "stationary.csv")
    path = write_config({"system": KINETIC, "params": {"dt": 0.01, "T": 20.0, "burn_in": 2.0}})
    result = runner.invoke(args=["estimate-stationary", "--config", path, "--out", out])
    assert result.exit_code == 0, result.output
    values = {r["name"]: float(r["value"]) for r in read_rows(out)}
    assert values["lyapunov_cov_0_0"] == pytest.approx(0.5)
    assert values["lyapunov_cov_0_1"] == pytest.approx(0.0, abs=1e-12)
    assert "cov_1_1" in values and "mean_0" in values


def test_harnack_audit_command(runner, write_config, tmp_path):
    out = str(tmp_path / "harnack.csv")
    system = {"preset": "kinetic_fp", "params": {"sigma": 4.0}}
    path = write_config({"system": system, "params": {"gaps": [0.5, 1.0], "direction": [0.0, 1.0],
                                                      "paths": 5000}})
    result = runner.invoke(args=["harnack-audit", "--config", path, "--out", out])
    assert result.exit_code == 0, result.output
    rows = read_rows(out)
    assert [r["name"] for r in rows].count("c0") == 2
    assert rows[-1]["name"] == "c0_ratio"


def test_bad_param_type_exits_two(runner, write_config, tmp_path):
    out = str(tmp_path / "s.csv")
    result = runner.invoke(args=["simulate", "--config", write_config({"system": KINETIC, "params": {"dt": "abc"}}),
                                 "--out", out])
    assert result.exit_code == 2
    assert "config_error" in result.output
    assert not os.path.exists(out)


def test_harnack_audit_default_gaps(runner, write_config, tmp_path):
    out = str(tmp_path / "harnack.csv")
    result = runner.invoke(args=["harnack-audit", "--config",
                                 write_config({"system": KINETIC, "params": {"paths": 2000}}), "--out", out])
    assert result.exit_code == 0, result.output
    c0 = [float(r["value"]) for r in read_rows(out) if r["name"] == "c0"]
    assert len(c0) == 4 and all(np.isfinite(c0))
