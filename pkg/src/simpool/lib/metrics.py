# src/simpool/lib/metrics.py
"""
Periodic sampling of the observables, CSV export and summary statistics.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from simpool.errors import InvalidParameter, SimpoolIOError
from simpool.lib.central_manager import WORK_KINDS
from simpool.lib.kernel import EventRecord, SimTime
from simpool.lib.pool import GLOBAL_POOL, Job, JobState, PoolListener, SlotState

if TYPE_CHECKING:
    from simpool.simulation import Simulation

logger = logging.getLogger(__name__)

SATURATED_DUTY = 0.95


@dataclass(slots=True)
class MetricsFrame:
    at: SimTime
    running_total: int = 0
    idle_total: int = 0
    cores_total: int = 0
    cores: Dict[str, int] = field(default_factory=dict)
    unclaimed_true: int = 0
    unclaimed_viewed: int = 0
    duty: Dict[str, float] = field(default_factory=dict)
    udp_drops: int = 0
    stale_fail: int = 0
    ccb_reg: int = 0
    nego_ms: int = 0
    running: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class SeriesLayout:
    """Column naming for a run: providers, collectors and schedds in config order."""

    providers: Tuple[str, ...] = ()
    collectors: Tuple[str, ...] = ("top",)
    schedds: Tuple[str, ...] = ()

    @property
    def columns(self) -> List[str]:
        return [
            "t_ms",
            "running_total",
            "idle_total",
            "cores_total",
            *(f"cores_{p}" for p in self.providers),
            "unclaimed_true",
            "unclaimed_viewed",
            *(f"duty_{c}" for c in self.collectors),
            "udp_drops",
            "stale_fail",
            "ccb_reg",
            "nego_ms",
            *(f"running_{s}" for s in self.schedds),
        ]


@dataclass(frozen=True, slots=True)
class SummaryStats:
    series: str
    plateau_value: Optional[float]
    plateau_start: Optional[SimTime]
    plateau_samples: int
    peak: float
    peak_at: Optional[SimTime]
    time_average: float


# ---------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------
class MetricsRecorder(PoolListener):
    """Samples a frame every interval and tallies completions per label."""

    def __init__(self, sim: "Simulation", interval: SimTime, duty_window: Optional[SimTime] = None):
        if interval <= 0:
            raise InvalidParameter(f"sampling interval must be > 0 (got {interval})")
        self.sim = sim
        self.interval = interval
        self.duty_window = duty_window or interval
        self.frames: List[MetricsFrame] = []
        self.completions: Dict[str, int] = {}
        self._last_drops = 0
        self._last_stale = 0
        sim.kernel.on("metrics.sample", self._on_sample)
        sim.model.listeners.append(self)

    def start(self, horizon: SimTime) -> None:
        self.horizon = horizon
        if self.interval <= horizon:
            self.sim.kernel.at(self.interval, "metrics.sample")

    def _on_sample(self, ev: EventRecord) -> None:
        frame = self.sample_frame(ev.fire_at)
        self.frames.append(frame)
        if self.sim.checker is not None:
            self.sim.checker.check(frame)
        nxt = ev.fire_at + self.interval
        if nxt <= self.horizon:
            self.sim.kernel.at(nxt, "metrics.sample")

    def sample_frame(self, at: SimTime) -> MetricsFrame:
        return sample_frame(self.sim, at, self)

    def job_completed(self, job: Job, at: SimTime) -> None:
        self.completions[job.label] = self.completions.get(job.label, 0) + 1


def sample_frame(
    sim: "Simulation", at: SimTime, recorder: Optional[MetricsRecorder] = None
) -> MetricsFrame:
    model = sim.model
    window = recorder.duty_window if recorder is not None else sim.cfg.metrics.duty_window
    cores = {p: model.cores_in_use.get(p, 0) for p in sim.layout.providers}
    main = sim.central_managers[GLOBAL_POOL]
    duty = {c: main.duty(c, window, at) for c in sim.layout.collectors}
    for cm in sim.central_managers.values():
        cm.sync(at)
    drops = sum(cm.drops for cm in sim.central_managers.values())
    stale = sum(cm.counters.stale_claims for cm in sim.central_managers.values())
    frame = MetricsFrame(
        at=at,
        running_total=model.running_jobs,
        idle_total=model.idle_jobs_total,
        cores_total=sum(cores.values()),
        cores=cores,
        unclaimed_true=model.slot_states[SlotState.UNCLAIMED],
        unclaimed_viewed=sum(cm.viewed_unclaimed for cm in sim.central_managers.values()),
        duty=duty,
        udp_drops=drops - (recorder._last_drops if recorder else 0),
        stale_fail=stale - (recorder._last_stale if recorder else 0),
        ccb_reg=sum(len(cm.ccb.registered) for cm in sim.central_managers.values()),
        nego_ms=int(main.negotiators[0].last_cycle_duration),
        running={s.name: len(s.running) for s in model.schedds.values()},
    )
    if recorder is not None:
        recorder._last_drops = drops
        recorder._last_stale = stale
    return frame


# ---------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------
def frames_to_dataframe(frames: Sequence[MetricsFrame], layout: SeriesLayout) -> pd.DataFrame:
    rows = []
    for f in frames:
        row: Dict[str, Any] = {
            "t_ms": f.at,
            "running_total": f.running_total,
            "idle_total": f.idle_total,
            "cores_total": f.cores_total,
        }
        row.update({f"cores_{p}": f.cores.get(p, 0) for p in layout.providers})
        row["unclaimed_true"] = f.unclaimed_true
        row["unclaimed_viewed"] = f.unclaimed_viewed
        row.update({f"duty_{c}": float(f.duty.get(c, 0.0)) for c in layout.collectors})
        row.update(
            udp_drops=f.udp_drops, stale_fail=f.stale_fail, ccb_reg=f.ccb_reg, nego_ms=f.nego_ms
        )
        row.update({f"running_{s}": f.running.get(s, 0) for s in layout.schedds})
        rows.append(row)
    df = pd.DataFrame(rows, columns=layout.columns)
    for col in layout.columns:
        df[col] = df[col].astype(float if col.startswith("duty_") else "int64")
    return df


def write_series(frames: Sequence[MetricsFrame], destination: Path, layout: SeriesLayout) -> Path:
    """CSV with a fixed header; integers exact, reals with six decimals."""
    destination = Path(destination)
    df = frames_to_dataframe(frames, layout)
    try:
        destination.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(destination, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise SimpoolIOError(f"cannot write {destination}: {e}") from e
    return destination


def read_series(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except OSError as e:
        raise SimpoolIOError(f"cannot read {path}: {e}") from e


# ---------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------
def detect_plateau(
    series: Sequence[Tuple[SimTime, float]], window: int, tolerance: float, name: str = ""
) -> SummaryStats:
    """
    Longest run of samples ending at the last one whose spread stays within
    tolerance x mean; a plateau needs at least `window` samples.
    """
    if window < 2:
        raise InvalidParameter(f"plateau window must be >= 2 (got {window})")
    if tolerance <= 0:
        raise InvalidParameter(f"plateau tolerance must be > 0 (got {tolerance})")
    if not series:
        return SummaryStats(name, None, None, 0, 0.0, None, 0.0)
    times = np.asarray([t for t, _ in series], dtype=np.int64)
    values = np.asarray([v for _, v in series], dtype=float)
    n = len(values)
    hi = lo = total = values[-1]
    count = 1
    for i in range(n - 2, -1, -1):
        v = values[i]
        nhi, nlo, ntotal = max(hi, v), min(lo, v), total + v
        if nhi - nlo > tolerance * abs(ntotal / (count + 1)):
            break
        hi, lo, total = nhi, nlo, ntotal
        count += 1
    peak_idx = int(np.argmax(values))
    if count >= window:
        start = n - count
        return SummaryStats(
            name,
            float(values[start:].mean()),
            int(times[start]),
            count,
            float(values[peak_idx]),
            int(times[peak_idx]),
            float(values.mean()),
        )
    return SummaryStats(
        name, None, None, 0, float(values[peak_idx]), int(times[peak_idx]), float(values.mean())
    )


def series_of(
    frames: Sequence[MetricsFrame], layout: SeriesLayout, column: str
) -> List[Tuple[SimTime, float]]:
    df = frames_to_dataframe(frames, layout)
    if column not in df.columns:
        raise InvalidParameter(f"unknown series '{column}'")
    return list(zip(df["t_ms"].tolist(), df[column].astype(float).tolist()))


def first_time(frames: Sequence[MetricsFrame], predicate: Any) -> Optional[SimTime]:
    for f in frames:
        if predicate(f):
            return f.at
    return None


def plateau_reached(
    series: Sequence[Tuple[SimTime, float]], plateau: SummaryStats
) -> Optional[SimTime]:
    """First sample inside the plateau run at or above the plateau value."""
    if plateau.plateau_start is None or plateau.plateau_value is None:
        return None
    for t, v in series:
        if t >= plateau.plateau_start and v >= plateau.plateau_value:
            return t
    return None


def saturation_chain(
    frames: Sequence[MetricsFrame],
    plateau_start: Optional[SimTime],
    reached: Optional[SimTime] = None,
) -> Dict[str, Any]:
    """
    First times of: top duty >= 0.95, a UDP drop, a stale claim, the
    running-jobs plateau being reached. `plateau_start` is the first sample
    of the tolerance band and is reported alongside.
    """
    chain: Dict[str, Any] = {
        "duty_saturated": first_time(frames, lambda f: f.duty.get("top", 0.0) >= SATURATED_DUTY),
        "first_drop": first_time(frames, lambda f: f.udp_drops > 0),
        "first_stale_claim": first_time(frames, lambda f: f.stale_fail > 0),
        "plateau_reached": reached,
    }
    steps = list(chain.values())
    chain["plateau_start"] = plateau_start
    chain["ordered"] = all(t is not None for t in steps) and all(
        a <= b for a, b in zip(steps, steps[1:])  # type: ignore[operator]
    )
    return chain


def summarize(sim: "Simulation", frames: Sequence[MetricsFrame]) -> Dict[str, Any]:
    mcfg = sim.cfg.metrics
    layout = sim.layout
    df = frames_to_dataframe(frames, layout)
    plateau_series = series_of(frames, layout, mcfg.plateau_series)
    plateau = detect_plateau(
        plateau_series,
        mcfg.plateau_window,
        mcfg.plateau_tolerance,
        mcfg.plateau_series,
    )
    series: Dict[str, Any] = {}
    for col in layout.columns[1:]:
        values = df[col].astype(float)
        series[col] = {
            "peak": float(values.max()) if len(values) else 0.0,
            "mean": float(values.mean()) if len(values) else 0.0,
            "last": float(values.iloc[-1]) if len(values) else 0.0,
        }
    providers: Dict[str, Any] = {}
    for p in sim.providers:
        col = f"cores_{p.id}"
        values = df[col].astype(float)
        providers[p.id] = {
            "kind": p.cfg.kind.value,
            "peak_cores_in_use": float(values.max()) if len(values) else 0.0,
            "time_average_cores_in_use": float(values.mean()) if len(values) else 0.0,
            "peak_live_cores": p.peak_live_cores,
            "glideins_submitted": p.submitted,
            "peak_window_cores": p.peak_window_cores,
            "window_duty_fraction": p.duty_fraction(sim.cfg.horizon_ms),
        }
    model = sim.model
    counters: Dict[str, Any] = {
        "jobs_submitted": model.submitted,
        "jobs_started": model.started,
        "jobs_completed": model.job_states[JobState.COMPLETED],
        "jobs_evicted": model.evicted,
        "jobs_refused": sum(s.refused for s in model.schedds.values()),
        "glideins": len(model.glideins),
        "events": sim.kernel.processed,
        "flocked_jobs": sum(r.routed for r in sim.routers.values()),
    }
    for pid, cm in sim.central_managers.items():
        counters[f"pool_{pid}"] = {
            **asdict(cm.counters),
            "udp_drops": cm.drops,
            "ccb_registered": len(cm.ccb.registered),
            "collector_max_queue": max(c.max_queue for c in cm.collectors),
            "top_busy_ms_by_kind": {k: cm.top.busy_by_kind.get(k, 0.0) for k in WORK_KINDS},
        }
    completed = counters["jobs_completed"]
    main = sim.central_managers[GLOBAL_POOL].counters
    return {
        "scenario": sim.cfg.name,
        "seed": sim.cfg.seed,
        "horizon_ms": sim.cfg.horizon_ms,
        "frames": len(frames),
        "plateau": asdict(plateau),
        "series": series,
        "providers": providers,
        "counters": counters,
        "transition_updates_per_completed_job": (
            main.transitions / completed if completed else None
        ),
        "schedd_saturation_ms": {
            model.schedds[sid].name: t for sid, t in sorted(model.first_saturation.items())
        },
        "saturation_chain": saturation_chain(
            frames, plateau.plateau_start, plateau_reached(plateau_series, plateau)
        ),
        "completions_by_label": dict(sorted(sim.recorder.completions.items())),
    }


def write_summary(summary: Dict[str, Any], destination: Path) -> Path:
    destination = Path(destination)
    try:
        destination.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
        destination.write_text(text, encoding="utf-8")
    except OSError as e:
        raise SimpoolIOError(f"cannot write {destination}: {e}") from e
    return destination


__all__ = [
    "MetricsFrame",
    "MetricsRecorder",
    "SATURATED_DUTY",
    "SeriesLayout",
    "SummaryStats",
    "detect_plateau",
    "plateau_reached",
    "frames_to_dataframe",
    "read_series",
    "sample_frame",
    "saturation_chain",
    "series_of",
    "summarize",
    "write_series",
    "write_summary",
]
