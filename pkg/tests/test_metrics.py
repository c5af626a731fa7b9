from __future__ import annotations

import pytest
from conftest import small_doc

from simpool.config import config_from_dict
from simpool.errors import InvalidParameter, SimpoolIOError
from simpool.lib.kernel import HOUR, MINUTE
from simpool.lib.metrics import (
    MetricsFrame,
    MetricsRecorder,
    SeriesLayout,
    detect_plateau,
    read_series,
    plateau_reached,
    saturation_chain,
    write_series,
)
from simpool.simulation import Simulation

LAYOUT = SeriesLayout(providers=("grid", "nersc"), collectors=("top",), schedds=("s0",))


def _frame(at, running=0, duty=0.0, drops=0, stale=0):
    return MetricsFrame(
        at=at,
        running_total=running,
        cores_total=running,
        cores={"grid": running},
        duty={"top": duty},
        udp_drops=drops,
        stale_fail=stale,
        running={"s0": running},
    )


# ---------------------------------------------------------------------
# Plateau detection
# ---------------------------------------------------------------------
def test_plateau_after_a_ramp():
    series = [(i * MINUTE, float(min(i * 10, 100))) for i in range(30)]
    stats = detect_plateau(series, window=5, tolerance=0.01, name="running_total")
    assert stats.plateau_value == 100.0
    assert stats.plateau_start == 10 * MINUTE
    assert stats.plateau_samples == 20
    assert stats.peak == 100.0
    assert stats.peak_at == 10 * MINUTE


def test_plateau_tolerates_small_noise():
    series = [(i, 1000.0 + (5 if i % 2 else -5)) for i in range(20)]
    stats = detect_plateau(series, window=10, tolerance=0.02)
    assert stats.plateau_value == pytest.approx(1000.0)
    assert stats.plateau_samples == 20


def test_no_plateau_on_a_ramp_or_an_empty_series():
    ramp = [(i, float(i + 1)) for i in range(20)]
    stats = detect_plateau(ramp, window=5, tolerance=0.01)
    assert stats.plateau_value is None
    assert stats.peak == 20.0
    empty = detect_plateau([], window=5, tolerance=0.01)
    assert empty.plateau_value is None and empty.peak == 0.0


def test_plateau_parameters_are_validated():
    with pytest.raises(InvalidParameter):
        detect_plateau([(0, 1.0)], window=1, tolerance=0.01)
    with pytest.raises(InvalidParameter):
        detect_plateau([(0, 1.0)], window=5, tolerance=0.0)


# ---------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------
def test_series_columns_follow_the_layout():
    layout = SeriesLayout(
        providers=("grid", "nersc"), collectors=("top", "secondary_0"), schedds=("a", "b")
    )
    assert layout.columns == [
        "t_ms",
        "running_total",
        "idle_total",
        "cores_total",
        "cores_grid",
        "cores_nersc",
        "unclaimed_true",
        "unclaimed_viewed",
        "duty_top",
        "duty_secondary_0",
        "udp_drops",
        "stale_fail",
        "ccb_reg",
        "nego_ms",
        "running_a",
        "running_b",
    ]


def test_write_series_formats_integers_and_reals(tmp_path):
    frames = [_frame(MINUTE, 3, 0.5), _frame(2 * MINUTE, 4, 1.0)]
    path = write_series(frames, tmp_path / "m.csv", LAYOUT)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LAYOUT.columns)
    assert lines[1].split(",")[:5] == ["60000", "3", "0", "3", "3"]
    assert "0.500000" in lines[1].split(",")
    df = read_series(path)
    assert df["running_total"].tolist() == [3, 4]
    assert df["duty_top"].tolist() == [0.5, 1.0]


def test_no_frames_gives_a_header_only_csv(tmp_path):
    path = write_series([], tmp_path / "empty.csv", LAYOUT)
    assert path.read_text() == ",".join(LAYOUT.columns) + "\n"


def test_write_series_reports_io_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(SimpoolIOError):
        write_series([], blocker / "m.csv", LAYOUT)
    with pytest.raises(SimpoolIOError):
        read_series(tmp_path / "missing.csv")


# ---------------------------------------------------------------------
# Saturation chain
# ---------------------------------------------------------------------
def test_saturation_chain_in_order():
    frames = [
        _frame(1, duty=0.5),
        _frame(2, duty=0.96),
        _frame(3, duty=1.0, drops=4),
        _frame(4, duty=1.0, stale=1),
    ]
    chain = saturation_chain(frames, plateau_start=3, reached=5)
    assert chain["duty_saturated"] == 2
    assert chain["first_drop"] == 3
    assert chain["first_stale_claim"] == 4
    assert chain["plateau_reached"] == 5
    assert chain["plateau_start"] == 3
    assert chain["ordered"] is True


def test_plateau_reached_before_the_first_stale_claim_is_out_of_order():
    frames = [_frame(1, duty=0.97, drops=1), _frame(2, duty=1.0), _frame(3, duty=1.0, stale=2)]
    chain = saturation_chain(frames, plateau_start=1, reached=2)
    assert chain["ordered"] is False


def test_plateau_is_reached_when_the_series_attains_its_level():
    series = [(i * MINUTE, float(min(i * 10, 100))) for i in range(30)]
    stats = detect_plateau(series, window=5, tolerance=0.2, name="running_total")
    # the band opens at 90 but the level is only attained at 100
    assert stats.plateau_start == 9 * MINUTE
    assert plateau_reached(series, stats) == 10 * MINUTE
    assert plateau_reached([(0, 1.0)], detect_plateau([(0, 1.0)], 2, 0.1)) is None


def test_saturation_chain_incomplete():
    chain = saturation_chain([_frame(1, duty=0.2)], plateau_start=None)
    assert chain["duty_saturated"] is None
    assert chain["ordered"] is False


# ---------------------------------------------------------------------
# Recording a run
# ---------------------------------------------------------------------
def test_recorder_samples_every_interval(small_config):
    sim = Simulation(small_config)
    frames = sim.run()
    assert len(frames) == 2 * HOUR // MINUTE
    assert frames[0].at == MINUTE
    assert frames[-1].at == 2 * HOUR
    assert all(f.running_total <= 120 for f in frames)
    assert all(f.cores_total == f.cores["grid"] for f in frames)


def test_summary_of_a_small_run(small_config):
    sim = Simulation(small_config)
    sim.run()
    summary = sim.summary()
    assert summary["frames"] == 120
    assert summary["series"]["running_total"]["peak"] == 120.0
    assert summary["counters"]["jobs_submitted"] >= 120
    assert set(summary["counters"]["pool_global"]["top_busy_ms_by_kind"]) >= {"update", "match"}
    assert summary["providers"]["grid"]["kind"] == "GridSite"
    assert set(summary["schedd_saturation_ms"]) == {"schedd-00", "schedd-01"}
    assert summary["completions_by_label"].get("Production", 0) > 0


def test_zero_horizon_records_nothing():
    sim = Simulation(config_from_dict(small_doc(horizon_ms=0)))
    assert sim.run() == []
    assert sim.summary()["frames"] == 0


def test_interval_must_be_positive(small_config):
    sim = Simulation(small_config)
    with pytest.raises(InvalidParameter):
        MetricsRecorder(sim, 0)
