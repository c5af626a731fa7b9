from __future__ import annotations

import json

import pytest
from conftest import small_doc

from simpool.config import config_from_dict, load_config
from simpool.errors import AssertionFailure, ConfigError, ConfigValidationError, SimpoolIOError
from simpool.lib.central_manager import calibrate_collector
from simpool.lib.kernel import HOUR, MINUTE
from simpool.scenarios import LIBRARY, get_entry, run_library_entry, run_scenario, sweep
from simpool.scenarios.library import BusyModel, Comparison, Expectation, ProductBound, lookup
from simpool.scenarios.runner import SWEEP_COLUMNS, sweep_dir_name
from simpool.simulation import Simulation

OUTPUTS = ("metrics.csv", "summary.json", "resolved-config.json")


# ---------------------------------------------------------------------
# Library
# ---------------------------------------------------------------------
@pytest.mark.parametrize("name", sorted(LIBRARY))
def test_every_library_entry_validates(name):
    entry = get_entry(name)
    assert entry.scenario().name == name
    for variant in entry.variants:
        entry.variant(variant)
    if entry.sweep is not None:
        pointer, values = entry.sweep
        assert pointer.startswith("/") and values


def test_unknown_library_entry():
    with pytest.raises(ConfigError, match="unknown library scenario"):
        get_entry("no-such-scenario")


def test_schedd_fleet_capacity_adds_up():
    sim = Simulation(get_entry("schedd-bottleneck").scenario())
    assert sum(s.capacity for s in sim.model.schedds.values()) == 500_000
    doc = small_doc(schedds=[{"name": "schedd", "count": 20, "memory_capacity_mb": 50_000}])
    sim = Simulation(config_from_dict(doc))
    assert sum(s.capacity for s in sim.model.schedds.values()) == 1_000_000


def test_expectations_and_comparisons():
    summary = {"series": {"running_total": {"peak": 95.0}}, "counters": {"flocked_jobs": 0}}
    assert Expectation("series.running_total.peak", 90, 100).check(summary) is None
    assert "below" in Expectation("series.running_total.peak", 96).check(summary)
    assert "above" in Expectation("counters.flocked_jobs", max=-1).check(summary, "x")
    assert "not available" in Expectation("series.nope.peak").check(summary)
    assert lookup(summary, "series.running_total.peak") == 95.0

    runs = {"": {"d": 2.0}, "fast": {"d": 1.0}, "zero": {"d": 0.0}}
    assert Comparison("d", "fast", max=0.5).check(runs) is None
    assert "above" in Comparison("d", "", "fast", max=1.5).check(runs)
    assert "denominator is zero" in Comparison("d", "", "zero").check(runs)
    assert "not available" in Comparison("d", "missing").check(runs)


def test_product_bound():
    summary = {"providers": {"hpc": {"avg": 500.0, "fraction": 0.5625, "peak": 1_000.0}}}
    fits = ProductBound("providers.hpc.avg", ("providers.hpc.fraction", "providers.hpc.peak"))
    assert fits.check(summary) is None
    summary["providers"]["hpc"]["avg"] = 600.0
    assert "above" in fits.check(summary)
    assert "not available" in ProductBound("providers.hpc.avg", ("nope",)).check(summary)


def _busy_run(duty_mean, update_ms, other_ms=3_997_030.0):
    return {
        "series": {"duty_top": {"mean": duty_mean}},
        "counters": {
            "pool_global": {"top_busy_ms_by_kind": {"update": update_ms, "heartbeat": other_ms}}
        },
    }


def test_busy_model_predicts_the_filtering_duty_ratio():
    model = BusyModel("filtering", {"update": 0.5})
    base = _busy_run(0.18379, 1_296_000.0)
    assert model.predicted(base) == pytest.approx(4_645_030 / 5_293_030)
    runs = {"": base, "filtering": _busy_run(0.16129, 648_000.0)}
    assert model.check(runs) is None
    runs["filtering"] = _busy_run(0.18379, 648_000.0)
    assert "busy-time model predicts 0.8776" in model.check(runs)
    assert "not available" in model.check({"": base})


# ---------------------------------------------------------------------
# Runs on disk
# ---------------------------------------------------------------------
def test_run_writes_the_three_outputs(small_config, tmp_path):
    result = run_scenario(small_config, tmp_path / "run")
    for name in OUTPUTS:
        assert (result.out_dir / name).is_file()
    summary = json.loads((result.out_dir / "summary.json").read_text())
    assert summary["scenario"] == "small"
    assert summary["seed"] == 7
    assert result.metrics_csv.read_text().splitlines()[0].startswith("t_ms,running_total,")


def test_runs_are_byte_identical_for_a_seed(small_config, tmp_path):
    a = run_scenario(small_config, tmp_path / "a")
    b = run_scenario(small_config, tmp_path / "b")
    c = run_scenario(small_config, tmp_path / "c", seed=8)
    for name in OUTPUTS:
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()
    assert a.metrics_csv.read_bytes() != c.metrics_csv.read_bytes()


def test_resolved_config_reproduces_the_run(tmp_path):
    doc = small_doc(pools=[{"id": "global", "collector": {"calibrate": {"target_slots": 8_000}}}])
    first = run_scenario(config_from_dict(doc), tmp_path / "first", until=HOUR)
    resolved = load_config(first.out_dir / "resolved-config.json")
    assert resolved.horizon_ms == HOUR
    assert resolved.pools[0].collector.calibrate is None
    expected = calibrate_collector(8_000, 6 * HOUR, 5 * MINUTE, False)
    assert resolved.pools[0].collector.cost_update_ms == pytest.approx(expected)

    again = run_scenario(resolved, tmp_path / "again")
    assert again.metrics_csv.read_bytes() == first.metrics_csv.read_bytes()


def test_unwritable_output_directory(small_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(SimpoolIOError):
        run_scenario(small_config, blocker / "run")


def test_failed_expectation_still_writes_outputs(small_config, tmp_path):
    with pytest.raises(AssertionFailure) as exc:
        run_scenario(
            small_config,
            tmp_path / "run",
            expectations=[Expectation("series.running_total.peak", min=1_000_000)],
        )
    assert len(exc.value.violations) == 1
    assert (tmp_path / "run" / "summary.json").is_file()


# ---------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------
def test_sweep_dir_name():
    assert sweep_dir_name("/pools/0/negotiator/threads", 4.0) == "threads=4"
    assert sweep_dir_name("/providers/0/pledged_cores", 2.5) == "pledged_cores=2.5"


def test_sweep_runs_each_value(small_config, tmp_path):
    df = sweep(small_config, "/providers/0/pledged_cores", [40, 80], tmp_path)
    assert list(df.columns) == SWEEP_COLUMNS
    assert df["value"].tolist() == [40, 80]
    assert (df["error"] == "").all()
    assert (df["peak_running"] <= df["value"]).all()
    for v in (40, 80):
        assert (tmp_path / f"pledged_cores={v}" / "metrics.csv").is_file()
    assert (tmp_path / "sweep-summary.csv").is_file()


def test_sweep_validates_every_point_before_running(small_config, tmp_path):
    with pytest.raises(ConfigValidationError):
        sweep(small_config, "/schedds/0/ram_per_running_job_mb", [1, 0], tmp_path)
    assert not (tmp_path / "ram_per_running_job_mb=1").exists()
    with pytest.raises(ConfigValidationError):
        sweep(small_config, "/name", [1], tmp_path)


@pytest.mark.slow
def test_sweep_in_worker_processes(small_config, tmp_path):
    df = sweep(small_config, "/pools/0/negotiator/threads", [1, 4], tmp_path, workers=2)
    assert df["value"].tolist() == [1, 4]
    assert (df["error"] == "").all()


# ---------------------------------------------------------------------
# Library runs
# ---------------------------------------------------------------------
@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(n for n, e in LIBRARY.items() if not e.heavy))
def test_library_entry_meets_its_expectations(name, tmp_path):
    results = run_library_entry(get_entry(name), tmp_path)
    assert all(not r.violations for r in results.values())


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(n for n, e in LIBRARY.items() if not e.heavy))
def test_library_entry_keeps_the_pool_invariants(name, tmp_path):
    cfg = get_entry(name).scenario().model_copy(update={"check_invariants": True})
    result = run_scenario(cfg, tmp_path / "run")
    assert result.summary["frames"] > 0


@pytest.mark.slow
def test_collector_saturation_sweep_duty_rises_and_levels_off(tmp_path):
    entry = get_entry("collector-saturation-1to100")
    pointer, values = entry.sweep
    df = sweep(entry.scenario(), pointer, values, tmp_path)
    assert (df["error"] == "").all()
    for column in ("peak_duty_top", "mean_duty_top"):
        duty = df[column].tolist()
        assert all(b >= a - 0.01 for a, b in zip(duty, duty[1:])), (column, duty)
    assert df["peak_duty_top"].iloc[-1] >= 0.95
    target = 8_000
    for value, plateau in zip(df["value"], df["plateau_running"]):
        if value >= target:
            assert 0.9 * target <= plateau <= 1.1 * target
        else:
            assert plateau <= value


@pytest.mark.slow
def test_collector_saturation_chain_is_ordered(tmp_path):
    [result] = run_library_entry(get_entry("collector-saturation-1to100"), tmp_path).values()
    chain = result.summary["saturation_chain"]
    assert chain["ordered"] is True
    assert chain["duty_saturated"] <= chain["first_drop"] <= chain["first_stale_claim"]
    assert chain["first_stale_claim"] <= chain["plateau_reached"]
    assert result.summary["counters"]["pool_global"]["registration_refusals"] > 0
