# src/simpool/lib/workload.py
"""
Synthetic job streams feeding the schedd fleet.

A stream either keeps a constant backlog of idle jobs on each target schedd
or submits at a fixed rate (constant spacing or a Poisson process), round
robin across its targets.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Tuple

from simpool.config import (
    BacklogArrival,
    ChoiceDist,
    ConstantDist,
    Distribution,
    ExponentialDist,
    LogNormalDist,
    StreamConfig,
    UniformDist,
)
from simpool.errors import ConfigError, InvalidParameter
from simpool.lib.kernel import SECOND, EventRecord, Kernel, RandomStream, SimTime
from simpool.lib.pool import Job, PoolListener, PoolModel, Schedd

logger = logging.getLogger(__name__)


def sample(dist: Distribution, stream: RandomStream) -> float:
    """One draw from a configured distribution."""
    if isinstance(dist, ConstantDist):
        return dist.value
    if isinstance(dist, ExponentialDist):
        return stream.exponential(dist.mean)
    if isinstance(dist, UniformDist):
        return stream.uniform(dist.low, dist.high)
    if isinstance(dist, LogNormalDist):
        return stream.lognormal(dist.mean, dist.sigma)
    if isinstance(dist, ChoiceDist):
        return float(stream.choice(dist.values, dist.weights))
    raise InvalidParameter(f"unsupported distribution {dist!r}")


class WorkloadStream(PoolListener):
    def __init__(self, kernel: Kernel, model: PoolModel, cfg: StreamConfig, targets: List[Schedd]):
        if not targets:
            raise ConfigError(f"stream {cfg.id} has no target schedds")
        self.kernel = kernel
        self.model = model
        self.cfg = cfg
        self.id = cfg.id
        self.targets = targets
        self._cores = kernel.stream(f"{cfg.id}.cores")
        self._memory = kernel.stream(f"{cfg.id}.memory")
        self._duration = kernel.stream(f"{cfg.id}.duration")
        self._arrivals = kernel.stream(f"{cfg.id}.arrivals")

        self.submitted = 0
        self.refused = 0
        self.until: Optional[SimTime] = None
        self._rr = 0
        self._k = 0
        self._poisson_t = 0.0
        self._replenish_pending = False
        # idle jobs of this stream per schedd id
        self.idle: Dict[int, int] = {s.id: 0 for s in targets}

        self._kind = f"stream[{cfg.id}]"
        kernel.on(f"{self._kind}.arrival", self._on_arrival)
        kernel.on(f"{self._kind}.replenish", self._on_replenish)
        model.listeners.append(self)

    @property
    def backlog_mode(self) -> bool:
        return isinstance(self.cfg.arrival, BacklogArrival)

    # --- jobs --------------------------------------------------------
    def sample_shape(self) -> Tuple[int, int, SimTime]:
        shape = self.cfg.shape
        cores = max(1, int(round(sample(shape.cores, self._cores))))
        memory = max(0, int(round(sample(shape.memory_mb, self._memory))))
        duration = max(1, int(round(sample(shape.duration_ms, self._duration))))
        return cores, memory, duration

    def sample_job(self, schedd: Schedd, at: SimTime) -> Optional[Job]:
        """Sample a job shape and queue it on `schedd`; None when the schedd refuses it."""
        cores, memory, duration = self.sample_shape()
        job = self.model.new_job(
            schedd, cores, memory, duration, at, stream=self.id, label=self.cfg.label.value
        )
        if job is None:
            self.refused += 1
            return None
        self.submitted += 1
        self.idle[schedd.id] += 1
        return job

    # --- arrival processes -------------------------------------------
    def generate_arrivals(self, until: SimTime) -> int:
        """Arm the arrival process up to (not including) `until`; returns jobs submitted so far."""
        stop = self.cfg.stop_ms
        self.until = until if stop is None else min(until, stop)
        start = max(self.cfg.start_ms, self.kernel.clock)
        if start >= self.until:
            return self.submitted
        if self.backlog_mode:
            if start == self.kernel.clock:
                self.replenish(start)
            else:
                self.kernel.at(start, f"{self._kind}.replenish")
                self._replenish_pending = True
        else:
            self._poisson_t = float(start)
            self._schedule_next_arrival(start)
        return self.submitted

    def replenish(self, at: SimTime) -> int:
        """Top every target schedd back up to the backlog depth."""
        assert isinstance(self.cfg.arrival, BacklogArrival)
        depth = self.cfg.arrival.depth
        added = 0
        for s in self.targets:
            while self.idle[s.id] < depth:
                if self.sample_job(s, at) is None:
                    break
                added += 1
        return added

    def _on_replenish(self, ev: EventRecord) -> None:
        self._replenish_pending = False
        if self.until is not None and ev.fire_at < self.until:
            self.replenish(ev.fire_at)

    def _schedule_next_arrival(self, start: SimTime) -> None:
        arrival = self.cfg.arrival
        rate = arrival.rate_per_s  # type: ignore[union-attr]
        if arrival.process == "constant":  # type: ignore[union-attr]
            t = start + math.floor(self._k * SECOND / rate)
        else:
            self._poisson_t += self._arrivals.exponential(SECOND / rate)
            t = math.ceil(self._poisson_t)
        if self.until is not None and t < self.until:
            self.kernel.at(t, f"{self._kind}.arrival", payload=start)

    def _on_arrival(self, ev: EventRecord) -> None:
        s = self.targets[self._rr % len(self.targets)]
        self._rr += 1
        self.sample_job(s, ev.fire_at)
        self._k += 1
        self._schedule_next_arrival(ev.payload)

    # --- pool listener -----------------------------------------------
    def job_started(self, job: Job, at: SimTime) -> None:
        if job.stream != self.id:
            return
        self.idle[job.schedd_id] -= 1
        if self.backlog_mode and not self._replenish_pending:
            if self.until is not None and at < self.until:
                self._replenish_pending = True
                self.kernel.at(at, f"{self._kind}.replenish")

    def job_evicted(self, job: Job, at: SimTime) -> None:
        if job.stream == self.id:
            self.idle[job.schedd_id] += 1


__all__ = ["WorkloadStream", "sample"]
