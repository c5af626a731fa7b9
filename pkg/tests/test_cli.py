from __future__ import annotations

import json

import pytest
from conftest import small_doc
from typer.testing import CliRunner

import simpool.cli as cli
from simpool.cli import EXIT_ASSERTION, EXIT_IO, EXIT_OK, EXIT_VALIDATION, app
from simpool.errors import AssertionFailure, SchedulingInPast
from simpool.lib.kernel import HOUR
from simpool.scenarios import LIBRARY

runner = CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_doc(horizon_ms=HOUR)))
    return path


def test_validate_ok(config_file):
    result = runner.invoke(app, ["validate", str(config_file)])
    assert result.exit_code == EXIT_OK
    assert result.output.startswith("ok: small")


def test_validate_reports_the_field(tmp_path):
    path = tmp_path / "bad.json"
    doc = small_doc(schedds=[{"name": "schedd", "ram_per_running_job_mb": 0}])
    path.write_text(json.dumps(doc))
    result = runner.invoke(app, ["validate", str(path)])
    assert result.exit_code == EXIT_VALIDATION
    assert "/schedds/0/ram_per_running_job_mb" in result.output


def test_validate_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    assert runner.invoke(app, ["validate", str(path)]).exit_code == EXIT_VALIDATION


def test_missing_config_is_an_io_error(tmp_path):
    result = runner.invoke(app, ["validate", str(tmp_path / "nope.json")])
    assert result.exit_code == EXIT_IO


def test_run_writes_outputs(config_file, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["run", str(config_file), "--out", str(out), "--seed", "3"])
    assert result.exit_code == EXIT_OK, result.output
    assert (out / "metrics.csv").is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3


def test_run_defaults_to_the_settings_outdir(config_file, tmp_path):
    result = runner.invoke(
        app, ["run", str(config_file), "--until", "0"], env={"SIMPOOL_OUTDIR": str(tmp_path)}
    )
    assert result.exit_code == EXIT_OK, result.output
    assert (tmp_path / "small" / "metrics.csv").read_text().startswith("t_ms,")


def test_failed_expectations_exit_with_three(config_file, tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        raise AssertionFailure(["series.running_total.peak = 0 below 1"])

    monkeypatch.setattr(cli, "run_scenario", failing)
    result = runner.invoke(app, ["run", str(config_file), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_ASSERTION
    assert "1 expectation(s) failed" in result.output


def test_bad_log_level_in_the_environment(config_file):
    result = runner.invoke(app, ["validate", str(config_file)], env={"SIMPOOL_LOG_LEVEL": "LOUD"})
    assert result.exit_code == EXIT_VALIDATION


def test_scenarios_lists_the_library():
    result = runner.invoke(app, ["scenarios"])
    assert result.exit_code == EXIT_OK
    for name in LIBRARY:
        assert name in result.output
    assert "schedd-bottleneck (heavy)" in result.output


def test_unknown_scenario(tmp_path):
    result = runner.invoke(app, ["scenario", "nope", "--out", str(tmp_path)])
    assert result.exit_code == EXIT_VALIDATION


def test_scenario_without_a_sweep(tmp_path):
    result = runner.invoke(app, ["scenario", "nersc-burst", "--sweep", "--out", str(tmp_path)])
    assert result.exit_code == EXIT_VALIDATION
    assert "has no sweep" in result.output


def test_sweep_command(config_file, tmp_path):
    result = runner.invoke(
        app,
        [
            "sweep", str(config_file),
            "--param", "/providers/0/pledged_cores",
            "--values", "40,80",
            "--out", str(tmp_path / "sweep"),
        ],
    )
    assert result.exit_code == EXIT_OK, result.output
    assert (tmp_path / "sweep" / "sweep-summary.csv").is_file()
    assert (tmp_path / "sweep" / "pledged_cores=80" / "summary.json").is_file()


def test_sweep_rejects_non_numeric_values(config_file, tmp_path):
    result = runner.invoke(
        app,
        ["sweep", str(config_file), "--param", "/seed", "--values", "a,b", "--out", str(tmp_path)],
    )
    assert result.exit_code == EXIT_VALIDATION


def test_plot_command(config_file, tmp_path):
    out = tmp_path / "out"
    assert runner.invoke(app, ["run", str(config_file), "--out", str(out)]).exit_code == EXIT_OK
    result = runner.invoke(app, ["plot", str(out / "metrics.csv"), "--no-html"])
    assert result.exit_code == EXIT_OK, result.output
    assert (out / "metrics.csv.gp").is_file()
    assert not (out / "metrics.csv.html").exists()


def test_other_simulator_errors_exit_cleanly(config_file, tmp_path, monkeypatch):
    def past(*args, **kwargs):
        raise SchedulingInPast(5, 10)

    monkeypatch.setattr(cli, "run_scenario", past)
    result = runner.invoke(app, ["run", str(config_file), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_VALIDATION
    assert result.exception is None or isinstance(result.exception, SystemExit)
    assert "cannot schedule at t=5 ms" in result.output
