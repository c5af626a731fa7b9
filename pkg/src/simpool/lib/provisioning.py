# src/simpool/lib/provisioning.py
"""
Resource providers: Grid sites filling a steady pledge under workload
pressure, HPC facilities delivering burst allocations, and the flock
router that delegates idle jobs to a federated subpool.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from simpool.config import (
    BurstWindowConfig,
    Integration,
    ProviderConfig,
    ProviderKind,
    RandomBurstsConfig,
)
from simpool.errors import ConfigError, SimpoolIOError
from simpool.lib.kernel import MINUTE, EventRecord, Kernel, RandomStream, SimTime
from simpool.lib.pool import GLOBAL_POOL, GlideinSpec, Job, JobState, PoolModel
from simpool.lib.workload import sample

logger = logging.getLogger(__name__)

BURST_CSV_COLUMNS = ["start_ms", "duration_ms", "cores"]


@dataclass(frozen=True, slots=True)
class BurstWindow:
    start: SimTime
    duration: SimTime
    cores: int

    @property
    def end(self) -> SimTime:
        return self.start + self.duration

    def contains(self, at: SimTime) -> bool:
        return self.start <= at < self.end


class FlockDecision(str, Enum):
    ROUTED = "RoutedToSubpool"
    STAY = "StayPrimary"


@dataclass(frozen=True, slots=True)
class FederationLink:
    subpool: str
    flock_threshold: SimTime = 5 * MINUTE


# ---------------------------------------------------------------------
# Burst schedules
# ---------------------------------------------------------------------
def check_windows(windows: Sequence[BurstWindow]) -> List[BurstWindow]:
    ordered = sorted(windows, key=lambda w: w.start)
    for w in ordered:
        if w.duration <= 0 or w.cores <= 0:
            raise ConfigError(f"burst window at {w.start} ms needs duration > 0 and cores > 0")
    for a, b in zip(ordered, ordered[1:]):
        if a.end > b.start:
            raise ConfigError(
                f"burst windows overlap: [{a.start}, {a.end}) and [{b.start}, {b.end})"
            )
    return ordered


def load_burst_schedule(path: Path) -> List[BurstWindow]:
    """Read a `start_ms,duration_ms,cores` CSV, one row per window."""
    try:
        df = pd.read_csv(path)
    except FileNotFoundError as e:
        raise SimpoolIOError(f"burst schedule not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read burst schedule {path}: {e}") from e
    if list(df.columns) != BURST_CSV_COLUMNS:
        raise ConfigError(
            f"{path}: header must be {','.join(BURST_CSV_COLUMNS)} "
            f"(got {','.join(map(str, df.columns))})"
        )
    windows = []
    for row in df.itertuples(index=False):
        w = BurstWindowConfig(
            start_ms=int(row.start_ms), duration_ms=int(row.duration_ms), cores=int(row.cores)
        )
        windows.append(BurstWindow(w.start_ms, w.duration_ms, w.cores))
    return check_windows(windows)


def generate_bursts(cfg: RandomBurstsConfig, stream: RandomStream) -> List[BurstWindow]:
    """Exponential gaps, log-normal sizes, uniform durations; never overlapping."""
    windows = []
    start = cfg.first_start_ms
    for _ in range(cfg.count):
        duration = int(stream.uniform(cfg.min_duration_ms, cfg.max_duration_ms))
        cores = max(1, round(stream.lognormal(cfg.mean_cores, cfg.sigma)))
        windows.append(BurstWindow(start, max(1, duration), cores))
        start += max(1, duration) + math.ceil(stream.exponential(cfg.mean_gap_ms))
    return windows


# ---------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------
def glideins_to_pledge(
    target_cores: int, live_cores: int, glidein_cores: int, budget: int
) -> int:
    """Whole glideins needed to reach target_cores without exceeding it, capped by budget."""
    if glidein_cores <= 0 or target_cores <= live_cores:
        return 0
    return max(0, min((target_cores - live_cores) // glidein_cores, budget))


class Provider:
    def __init__(self, kernel: Kernel, model: PoolModel, cfg: ProviderConfig):
        self.kernel = kernel
        self.model = model
        self.cfg = cfg
        self.id = cfg.id
        t = cfg.glidein
        self.template = t
        windows = [BurstWindow(w.start_ms, w.duration_ms, w.cores) for w in cfg.burst_schedule]
        if cfg.burst_schedule_csv is not None:
            windows.extend(load_burst_schedule(cfg.burst_schedule_csv))
        if cfg.random_bursts is not None:
            stream = kernel.stream(f"provider.{self.id}.bursts")
            windows.extend(generate_bursts(cfg.random_bursts, stream))
        self.windows = check_windows(windows)
        self.pool = integration_pool(cfg)
        self.budget_per_tick = max(
            1, cfg.pilot_submission_rate_limit * cfg.tick_interval_ms // MINUTE
        )
        self.inflight_cores = 0
        self.submitted = 0
        self.peak_live_cores = 0
        self._delay_stream = kernel.stream(f"provider.{self.id}.start_delay")

        self._kind = f"provider[{self.id}]"
        kernel.on(f"{self._kind}.tick", self._on_tick)
        kernel.on(f"{self._kind}.burst_start", self._on_burst_start)
        kernel.on(f"{self._kind}.burst_end", self._on_burst_end)
        kernel.on(f"{self._kind}.spawn", self._on_spawn)

    @property
    def is_grid(self) -> bool:
        return self.cfg.kind is ProviderKind.GRID

    @property
    def live_cores(self) -> int:
        return self.model.live_cores.get(self.id, 0)

    def start(self, at: SimTime = 0) -> None:
        self.kernel.at(at, f"{self._kind}.tick")
        for i, w in enumerate(self.windows):
            if w.end <= at:
                continue
            self.kernel.at(max(at, w.start), f"{self._kind}.burst_start", i)
            self.kernel.at(w.end, f"{self._kind}.burst_end", i)

    def active_window(self, at: SimTime) -> Optional[int]:
        for i, w in enumerate(self.windows):
            if w.contains(at):
                return i
        return None

    def active(self, at: SimTime) -> bool:
        return self.is_grid or self.active_window(at) is not None

    # --- ticks -------------------------------------------------------
    def _on_tick(self, ev: EventRecord) -> None:
        at = ev.fire_at
        if self.is_grid:
            self.provision_tick(self.model.idle_in_pool(self.pool), at)
        else:
            i = self.active_window(at)
            if i is not None:
                w = self.windows[i]
                n = glideins_to_pledge(
                    w.cores,
                    self.live_cores + self.inflight_cores,
                    self.template.cores,
                    self.budget_per_tick,
                )
                self._submit(n, at, window=i)
        self.kernel.at(at + self.cfg.tick_interval_ms, f"{self._kind}.tick")

    def provision_tick(self, pool_pressure: int, at: SimTime) -> int:
        """Grid: submit glideins toward the pledge when there is idle work."""
        if pool_pressure <= 0:
            return 0
        n = glideins_to_pledge(
            self.cfg.pledged_cores,
            self.live_cores + self.inflight_cores,
            self.template.cores,
            self.budget_per_tick,
        )
        return self._submit(n, at)

    # --- bursts ------------------------------------------------------
    def _on_burst_start(self, ev: EventRecord) -> None:
        self.burst_activation(ev.target, ev.fire_at)

    def burst_activation(self, window: int, at: SimTime) -> int:
        w = self.windows[window]
        n = glideins_to_pledge(
            w.cores, self.live_cores + self.inflight_cores, self.template.cores, w.cores
        )
        logger.info(
            "provider %s: allocation of %d cores opens at t=%d ms for %d ms (%d glideins)",
            self.id, w.cores, at, w.end - at, n,
        )
        return self._submit(n, at, window=window)

    def _on_burst_end(self, ev: EventRecord) -> None:
        self.allocation_end(ev.target, ev.fire_at)

    def allocation_end(self, window: int, at: SimTime) -> None:
        grace = self.cfg.allocation_grace_ms
        retired = 0
        for g in list(self.model.glideins.values()):
            if g.provider == self.id and g.window == window and g.alive:
                self.model.retire_glidein(g, grace, at)
                retired += 1
        logger.info(
            "provider %s: allocation %d ends at t=%d ms, %d glideins retired",
            self.id, window, at, retired,
        )

    # --- submission --------------------------------------------------
    def _spec(self, at: SimTime, window: Optional[int]) -> Optional[GlideinSpec]:
        t = self.template
        lifetime = t.lifetime_ms
        grace = t.grace_ms
        if window is not None:
            remaining = self.windows[window].end - at
            if remaining <= 0:
                return None
            lifetime = min(lifetime, remaining)
            grace = self.cfg.allocation_grace_ms
        return GlideinSpec(
            provider=self.id,
            pool=self.pool,
            startd_count=t.startd_count,
            slots_per_startd=t.slots_per_startd,
            slot_cores=t.slot_cores,
            slot_memory_mb=t.slot_memory_mb,
            lifetime=lifetime,
            grace=grace,
            window=window,
        )

    def _submit(self, n: int, at: SimTime, window: Optional[int] = None) -> int:
        if n <= 0:
            return 0
        delay_dist = self.cfg.start_delay
        for _ in range(n):
            if delay_dist is None:
                self._spawn(at, window)
            else:
                delay = int(sample(delay_dist, self._delay_stream))
                self.inflight_cores += self.template.cores
                self.kernel.at(at + delay, f"{self._kind}.spawn", window)
        self.submitted += n
        return n

    def _on_spawn(self, ev: EventRecord) -> None:
        self.inflight_cores -= self.template.cores
        self._spawn(ev.fire_at, ev.target)

    def _spawn(self, at: SimTime, window: Optional[int]) -> None:
        if window is not None and not self.windows[window].contains(at):
            return
        spec = self._spec(at, window)
        if spec is None:
            return
        self.model.spawn_glidein(spec, at, active=self.active(at))
        if self.live_cores > self.peak_live_cores:
            self.peak_live_cores = self.live_cores

    # --- schedule-derived bounds -------------------------------------
    def scheduled_core_ms(self) -> int:
        return sum(w.cores * w.duration for w in self.windows)

    def duty_fraction(self, horizon: SimTime) -> float:
        """Share of [0, horizon) covered by allocation windows."""
        if horizon <= 0:
            return 0.0
        covered = sum(max(0, min(w.end, horizon) - min(w.start, horizon)) for w in self.windows)
        return covered / horizon

    @property
    def peak_window_cores(self) -> int:
        return max((w.cores for w in self.windows), default=0)


# ---------------------------------------------------------------------
# Federation
# ---------------------------------------------------------------------
def flock_route(
    job: Job, link: FederationLink, at: SimTime, subpool_unclaimed: int
) -> FlockDecision:
    if job.state is not JobState.IDLE or subpool_unclaimed < 1:
        return FlockDecision.STAY
    if at - job.idle_since >= link.flock_threshold:
        return FlockDecision.ROUTED
    return FlockDecision.STAY


class FlockRouter:
    """Delegates long-idle global jobs to a subpool at each subpool negotiation cycle."""

    def __init__(self, model: PoolModel, link: FederationLink):
        self.model = model
        self.link = link
        self.routed = 0

    def __call__(self, subpool_unclaimed: int, at: SimTime) -> int:
        budget = subpool_unclaimed
        moved: List[Job] = []
        model = self.model
        for sid in model.pools[self.link.subpool].schedd_ids:
            if len(moved) >= budget:
                break
            for job in model.idle_jobs(model.schedds[sid], GLOBAL_POOL):
                if len(moved) >= budget:
                    break
                if flock_route(job, self.link, at, budget - len(moved)) is FlockDecision.ROUTED:
                    moved.append(job)
        for job in moved:
            job.pool = self.link.subpool
        self.routed += len(moved)
        return len(moved)


def integration_pool(cfg: ProviderConfig) -> str:
    if cfg.kind is ProviderKind.HPC and cfg.integration is Integration.SITE_EXTENSION:
        return GLOBAL_POOL
    return cfg.pool


__all__ = [
    "BURST_CSV_COLUMNS",
    "BurstWindow",
    "FederationLink",
    "FlockDecision",
    "FlockRouter",
    "Provider",
    "check_windows",
    "flock_route",
    "generate_bursts",
    "glideins_to_pledge",
    "integration_pool",
    "load_burst_schedule",
]
