# src/simpool/lib/pool.py
"""
Entity state machines: jobs, slots, startds, glideins, schedds and pools.

The PoolModel owns every entity of one simulation and performs the job and
slot lifecycle transitions. Collectors, workload streams and metrics learn
about those transitions through PoolListener callbacks.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterator, List, Optional, Set, Tuple

from simpool.errors import (
    CapacityExceeded,
    InvalidParameter,
    NotIdle,
    NotRunning,
    ProviderInactive,
    RequirementsMismatch,
    SlotNotClaimed,
)
from simpool.lib.kernel import HOUR, EventRecord, Kernel, SimTime

logger = logging.getLogger(__name__)

GLOBAL_POOL = "global"
DEFAULT_GRACE_MS = 6 * HOUR


class JobState(str, Enum):
    IDLE = "Idle"
    RUNNING = "Running"
    COMPLETED = "Completed"


class SlotState(str, Enum):
    UNCLAIMED = "Unclaimed"
    MATCHED = "Matched"
    CLAIMED = "Claimed"
    BUSY = "Busy"
    RETIRING = "Retiring"
    DEAD = "Dead"


class PoolRole(str, Enum):
    GLOBAL = "Global"
    SUBPOOL = "Subpool"


# ---------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------
@dataclass(slots=True)
class Job:
    id: int
    schedd_id: int
    req_cores: int
    req_memory_mb: int
    duration: SimTime
    submitted_at: SimTime
    stream: str = ""
    label: str = "Production"
    state: JobState = JobState.IDLE
    started_at: Optional[SimTime] = None
    completed_at: Optional[SimTime] = None
    slot_id: Optional[int] = None
    pool: str = GLOBAL_POOL
    idle_since: SimTime = 0
    attempt: int = 0
    evictions: int = 0


@dataclass(slots=True)
class Slot:
    id: int
    startd_id: int
    glidein_id: int
    cores: int
    memory_mb: int
    pool: str = GLOBAL_POOL
    provider: str = ""
    state: SlotState = SlotState.UNCLAIMED
    claimed_by: Optional[int] = None
    job_id: Optional[int] = None
    # state the slot advertised before the current same-instant claim began
    claim_origin: Optional[SlotState] = None


@dataclass(slots=True)
class Startd:
    id: int
    glidein_id: int
    pool: str
    slot_ids: List[int] = field(default_factory=list)
    ccb_registered: bool = False
    collector_registered: bool = False
    alive: bool = True


@dataclass(slots=True)
class GlideinSpec:
    """Shape of the glideins a provider submits."""

    provider: str
    pool: str = GLOBAL_POOL
    startd_count: int = 1
    slots_per_startd: int = 1
    slot_cores: int = 1
    slot_memory_mb: int = 2_000
    lifetime: SimTime = 48 * HOUR
    grace: SimTime = DEFAULT_GRACE_MS
    window: Optional[int] = None

    @property
    def total_slots(self) -> int:
        return self.startd_count * self.slots_per_startd

    @property
    def total_cores(self) -> int:
        return self.total_slots * self.slot_cores


@dataclass(slots=True)
class Glidein:
    id: int
    provider: str
    pool: str
    startd_count: int
    slots_per_startd: int
    slot_cores: int
    slot_memory_mb: int
    lifetime: SimTime
    started_at: SimTime
    grace: SimTime = DEFAULT_GRACE_MS
    window: Optional[int] = None
    startd_ids: List[int] = field(default_factory=list)
    slot_ids: List[int] = field(default_factory=list)
    alive: bool = True
    retiring: bool = False

    @property
    def total_slots(self) -> int:
        return self.startd_count * self.slots_per_startd

    @property
    def total_cores(self) -> int:
        return self.total_slots * self.slot_cores


@dataclass(slots=True)
class Schedd:
    id: int
    name: str
    memory_capacity_mb: int = 50_000
    ram_per_running_job_mb: int = 1
    max_idle_jobs: Optional[int] = None
    pools: List[str] = field(default_factory=lambda: [GLOBAL_POOL])
    # (job id, attempt); entries of jobs that left Idle are skipped lazily
    idle_queue: Deque[Tuple[int, int]] = field(default_factory=deque)
    idle_count: int = 0
    running: Set[int] = field(default_factory=set)
    refused: int = 0
    # matches planned by a running negotiation cycle, not yet claimed
    pending_matches: int = 0

    @property
    def capacity(self) -> int:
        return schedd_capacity(self)

    @property
    def memory_used_mb(self) -> int:
        return len(self.running) * self.ram_per_running_job_mb


@dataclass(slots=True)
class Pool:
    id: str
    role: PoolRole = PoolRole.GLOBAL
    glidein_ids: Set[int] = field(default_factory=set)
    schedd_ids: List[int] = field(default_factory=list)


def schedd_capacity(s: Schedd) -> int:
    """Hard cap on concurrently running jobs imposed by schedd memory."""
    if s.ram_per_running_job_mb <= 0:
        raise InvalidParameter(
            f"schedd {s.name}: ram_per_running_job_mb must be > 0 (got {s.ram_per_running_job_mb})"
        )
    return s.memory_capacity_mb // s.ram_per_running_job_mb


# ---------------------------------------------------------------------
# Observer interface
# ---------------------------------------------------------------------
class PoolListener:
    """No-op base; subclasses override the callbacks they care about."""

    def slot_transition(self, slot: Slot, before: SlotState, after: SlotState, at: SimTime) -> None:
        pass

    def slot_invalidated(self, slot: Slot, at: SimTime) -> None:
        pass

    def startd_spawned(self, startd: Startd, at: SimTime) -> None:
        pass

    def startd_dead(self, startd: Startd, at: SimTime) -> None:
        pass

    def job_started(self, job: Job, at: SimTime) -> None:
        pass

    def job_completed(self, job: Job, at: SimTime) -> None:
        pass

    def job_evicted(self, job: Job, at: SimTime) -> None:
        pass

    def glidein_gone(self, glidein: Glidein, at: SimTime) -> None:
        pass


# ---------------------------------------------------------------------
# Pool model
# ---------------------------------------------------------------------
class PoolModel:
    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.jobs: Dict[int, Job] = {}
        self.slots: Dict[int, Slot] = {}
        self.startds: Dict[int, Startd] = {}
        self.glideins: Dict[int, Glidein] = {}
        self.schedds: Dict[int, Schedd] = {}
        self.pools: Dict[str, Pool] = {}
        self.listeners: List[PoolListener] = []

        self._next_job = 0
        self._next_slot = 0
        self._next_startd = 0
        self._next_glidein = 0

        # live aggregates, maintained incrementally
        self.slot_states: Dict[SlotState, int] = {s: 0 for s in SlotState}
        self.job_states: Dict[JobState, int] = {s: 0 for s in JobState}
        self.cores_in_use: Dict[str, int] = {}
        self.live_cores: Dict[str, int] = {}
        self.provisioned_cores: Dict[str, int] = {}
        self.submitted = 0
        self.started = 0
        self.evicted = 0
        self.first_saturation: Dict[int, SimTime] = {}

        kernel.on("job.complete", self._on_job_complete)
        kernel.on("glidein.expire", self._on_glidein_expire)
        kernel.on("glidein.grace", self._on_glidein_grace)

    # --- setup -------------------------------------------------------
    def add_pool(self, pool_id: str, role: PoolRole = PoolRole.GLOBAL) -> Pool:
        pool = self.pools[pool_id] = Pool(pool_id, role)
        return pool

    def add_schedd(
        self,
        name: str,
        memory_capacity_mb: int = 50_000,
        ram_per_running_job_mb: int = 1,
        max_idle_jobs: Optional[int] = None,
        pools: Optional[List[str]] = None,
    ) -> Schedd:
        sid = len(self.schedds)
        schedd = Schedd(
            sid,
            name,
            memory_capacity_mb=memory_capacity_mb,
            ram_per_running_job_mb=ram_per_running_job_mb,
            max_idle_jobs=max_idle_jobs,
            pools=list(pools or [GLOBAL_POOL]),
        )
        schedd_capacity(schedd)
        self.schedds[sid] = schedd
        for p in schedd.pools:
            if p in self.pools:
                self.pools[p].schedd_ids.append(sid)
        return schedd

    # --- jobs --------------------------------------------------------
    def new_job(
        self,
        schedd: Schedd,
        req_cores: int,
        req_memory_mb: int,
        duration: SimTime,
        at: SimTime,
        stream: str = "",
        label: str = "Production",
    ) -> Optional[Job]:
        """Create and queue an Idle job; None when the schedd's idle queue is full."""
        if req_cores < 1 or req_memory_mb < 0 or duration <= 0:
            raise InvalidParameter(
                f"invalid job shape cores={req_cores} memory={req_memory_mb} duration={duration}"
            )
        if schedd.max_idle_jobs is not None and schedd.idle_count >= schedd.max_idle_jobs:
            schedd.refused += 1
            return None
        jid = self._next_job
        self._next_job += 1
        job = Job(
            jid,
            schedd.id,
            req_cores,
            req_memory_mb,
            int(duration),
            at,
            stream=stream,
            label=label,
            idle_since=at,
        )
        self.jobs[jid] = job
        schedd.idle_queue.append((jid, 0))
        schedd.idle_count += 1
        self.job_states[JobState.IDLE] += 1
        self.submitted += 1
        return job

    def idle_jobs(self, schedd: Schedd, pool: Optional[str] = None) -> Iterator[Job]:
        """
        Idle jobs of a schedd in FIFO order, optionally restricted to one pool.

        The queue must not be mutated while the iterator is live.
        """
        q = schedd.idle_queue
        # drop stale entries at the head, compact when the tail gets too long
        while q and not self._queued_idle(q[0]):
            q.popleft()
        if len(q) > 2 * schedd.idle_count + 64:
            schedd.idle_queue = q = deque(e for e in q if self._queued_idle(e))
        for entry in q:
            if self._queued_idle(entry):
                job = self.jobs[entry[0]]
                if pool is None or job.pool == pool:
                    yield job

    def _queued_idle(self, entry: Tuple[int, int]) -> bool:
        job = self.jobs[entry[0]]
        return job.state is JobState.IDLE and job.attempt == entry[1]

    def start_job(self, s: Schedd, j: Job, slot: Slot, at: SimTime) -> None:
        if j.state is not JobState.IDLE:
            raise NotIdle(f"job {j.id} is {j.state.value}, expected Idle")
        if slot.state is not SlotState.CLAIMED or slot.claimed_by != s.id:
            raise SlotNotClaimed(f"slot {slot.id} is {slot.state.value}, not claimed by {s.name}")
        if len(s.running) >= schedd_capacity(s):
            raise CapacityExceeded(
                f"schedd {s.name} already runs {len(s.running)} jobs "
                f"(capacity {schedd_capacity(s)})"
            )
        if slot.cores < j.req_cores or slot.memory_mb < j.req_memory_mb:
            raise RequirementsMismatch(
                f"job {j.id} needs {j.req_cores} cores/{j.req_memory_mb} MB, "
                f"slot {slot.id} offers {slot.cores}/{slot.memory_mb}"
            )
        j.state = JobState.RUNNING
        j.started_at = at
        j.slot_id = slot.id
        self.job_states[JobState.IDLE] -= 1
        self.job_states[JobState.RUNNING] += 1
        s.idle_count -= 1
        s.running.add(j.id)
        self.started += 1
        if len(s.running) == schedd_capacity(s) and s.id not in self.first_saturation:
            self.first_saturation[s.id] = at
            logger.info("schedd %s reached its running-job capacity (%d) at t=%d ms",
                        s.name, len(s.running), at)
        slot.job_id = j.id
        origin = slot.claim_origin if slot.claim_origin is not None else slot.state
        slot.claim_origin = None
        self._set_state(slot, SlotState.BUSY, at, emit=False)
        self._emit(slot, origin, SlotState.BUSY, at)
        self.cores_in_use[slot.provider] = self.cores_in_use.get(slot.provider, 0) + j.req_cores
        self.kernel.at(at + j.duration, "job.complete", j.id, j.attempt)
        for lst in self.listeners:
            lst.job_started(j, at)

    def complete_job(self, j: Job, at: SimTime) -> None:
        if j.state is not JobState.RUNNING:
            raise NotRunning(f"job {j.id} is {j.state.value}, expected Running")
        slot = self.slots[j.slot_id]  # type: ignore[index]
        schedd = self.schedds[j.schedd_id]
        j.state = JobState.COMPLETED
        j.completed_at = at
        self.job_states[JobState.RUNNING] -= 1
        self.job_states[JobState.COMPLETED] += 1
        schedd.running.discard(j.id)
        self._unbind(slot, j)
        if slot.state is SlotState.RETIRING:
            self._kill_slot(slot, at)
        else:
            self._set_state(slot, SlotState.UNCLAIMED, at)
        for lst in self.listeners:
            lst.job_completed(j, at)

    def evict_job(self, j: Job, at: SimTime) -> None:
        """Return a running job to the head of its schedd's idle queue."""
        if j.state is not JobState.RUNNING:
            raise NotRunning(f"job {j.id} is {j.state.value}, expected Running")
        slot = self.slots[j.slot_id]  # type: ignore[index]
        schedd = self.schedds[j.schedd_id]
        self._unbind(slot, j)
        schedd.running.discard(j.id)
        j.state = JobState.IDLE
        j.started_at = None
        j.attempt += 1
        j.evictions += 1
        j.pool = GLOBAL_POOL
        j.idle_since = at
        schedd.idle_queue.appendleft((j.id, j.attempt))
        schedd.idle_count += 1
        self.job_states[JobState.RUNNING] -= 1
        self.job_states[JobState.IDLE] += 1
        self.evicted += 1
        for lst in self.listeners:
            lst.job_evicted(j, at)

    def _unbind(self, slot: Slot, j: Job) -> None:
        slot.job_id = None
        slot.claimed_by = None
        j.slot_id = None
        self.cores_in_use[slot.provider] -= j.req_cores

    def _on_job_complete(self, ev: EventRecord) -> None:
        job = self.jobs[ev.target]
        if job.state is JobState.RUNNING and job.attempt == ev.payload:
            self.complete_job(job, ev.fire_at)

    # --- claims ------------------------------------------------------
    def claim_slot(self, slot: Slot, schedd: Schedd, at: SimTime) -> bool:
        """Unclaimed -> Matched -> Claimed; False when the slot is not truly Unclaimed."""
        if slot.state is not SlotState.UNCLAIMED:
            return False
        slot.claim_origin = slot.state
        self._set_state(slot, SlotState.MATCHED, at, emit=False)
        self._set_state(slot, SlotState.CLAIMED, at, emit=False)
        slot.claimed_by = schedd.id
        return True

    def release_claim(self, slot: Slot, at: SimTime) -> None:
        """Drop a claim that never started a job; no net transition is advertised."""
        if slot.state is SlotState.CLAIMED:
            slot.claimed_by = None
            slot.claim_origin = None
            self._set_state(slot, SlotState.UNCLAIMED, at, emit=False)

    # --- glideins ----------------------------------------------------
    def spawn_glidein(self, spec: GlideinSpec, at: SimTime, *, active: bool = True) -> List[int]:
        if not active:
            raise ProviderInactive(f"provider {spec.provider} has no active allocation at t={at}")
        if spec.startd_count < 1 or spec.slots_per_startd < 1 or spec.slot_cores < 1:
            raise InvalidParameter(f"invalid glidein shape for provider {spec.provider}")
        gid = self._next_glidein
        self._next_glidein += 1
        g = Glidein(
            gid,
            spec.provider,
            spec.pool,
            spec.startd_count,
            spec.slots_per_startd,
            spec.slot_cores,
            spec.slot_memory_mb,
            spec.lifetime,
            at,
            grace=spec.grace,
            window=spec.window,
        )
        self.glideins[gid] = g
        if spec.pool in self.pools:
            self.pools[spec.pool].glidein_ids.add(gid)
        new_startds: List[Startd] = []
        for _ in range(spec.startd_count):
            did = self._next_startd
            self._next_startd += 1
            startd = Startd(did, gid, spec.pool)
            for _ in range(spec.slots_per_startd):
                slot_id = self._next_slot
                self._next_slot += 1
                self.slots[slot_id] = Slot(
                    slot_id,
                    did,
                    gid,
                    spec.slot_cores,
                    spec.slot_memory_mb,
                    pool=spec.pool,
                    provider=spec.provider,
                )
                startd.slot_ids.append(slot_id)
                g.slot_ids.append(slot_id)
                self.slot_states[SlotState.UNCLAIMED] += 1
            self.startds[did] = startd
            g.startd_ids.append(did)
            new_startds.append(startd)
        self.live_cores[spec.provider] = self.live_cores.get(spec.provider, 0) + g.total_cores
        self.provisioned_cores[spec.provider] = (
            self.provisioned_cores.get(spec.provider, 0) + g.total_cores
        )
        if spec.lifetime > 0:
            self.kernel.at(at + spec.lifetime, "glidein.expire", gid)
        for startd in new_startds:
            for lst in self.listeners:
                lst.startd_spawned(startd, at)
        return list(g.slot_ids)

    def retire_glidein(self, g: Glidein, grace: SimTime, at: SimTime) -> None:
        if not g.alive or g.retiring:
            return
        g.retiring = True
        for sid in g.slot_ids:
            slot = self.slots[sid]
            if slot.state is SlotState.DEAD:
                continue
            self._set_state(slot, SlotState.RETIRING, at)
            if slot.job_id is None:
                self._kill_slot(slot, at)
        if grace <= 0:
            self._expire_grace(g, at)
        else:
            self.kernel.at(at + grace, "glidein.grace", g.id)

    def _expire_grace(self, g: Glidein, at: SimTime) -> None:
        for sid in g.slot_ids:
            slot = self.slots[sid]
            if slot.state is SlotState.DEAD:
                continue
            if slot.job_id is not None:
                self.evict_job(self.jobs[slot.job_id], at)
            self._kill_slot(slot, at)

    def _on_glidein_expire(self, ev: EventRecord) -> None:
        g = self.glideins[ev.target]
        self.retire_glidein(g, g.grace, ev.fire_at)

    def _on_glidein_grace(self, ev: EventRecord) -> None:
        g = self.glideins[ev.target]
        if g.alive:
            self._expire_grace(g, ev.fire_at)

    def _kill_slot(self, slot: Slot, at: SimTime) -> None:
        self._set_state(slot, SlotState.DEAD, at, emit=False)
        self.live_cores[slot.provider] -= slot.cores
        for lst in self.listeners:
            lst.slot_invalidated(slot, at)
        startd = self.startds[slot.startd_id]
        if startd.alive and all(self.slots[s].state is SlotState.DEAD for s in startd.slot_ids):
            startd.alive = False
            for lst in self.listeners:
                lst.startd_dead(startd, at)
            g = self.glideins[startd.glidein_id]
            if all(not self.startds[d].alive for d in g.startd_ids):
                g.alive = False
                if g.pool in self.pools:
                    self.pools[g.pool].glidein_ids.discard(g.id)
                for lst in self.listeners:
                    lst.glidein_gone(g, at)

    # --- state bookkeeping -------------------------------------------
    def _set_state(self, slot: Slot, state: SlotState, at: SimTime, emit: bool = True) -> None:
        before = slot.state
        if before is state:
            return
        if before is SlotState.DEAD:
            raise InvalidParameter(f"slot {slot.id} is Dead; Dead is terminal")
        self.slot_states[before] -= 1
        self.slot_states[state] += 1
        slot.state = state
        if emit:
            self._emit(slot, before, state, at)

    def _emit(self, slot: Slot, before: SlotState, after: SlotState, at: SimTime) -> None:
        if before is after:
            return
        for lst in self.listeners:
            lst.slot_transition(slot, before, after, at)

    # --- queries -----------------------------------------------------
    @property
    def running_jobs(self) -> int:
        return self.job_states[JobState.RUNNING]

    @property
    def idle_jobs_total(self) -> int:
        return self.job_states[JobState.IDLE]

    def idle_in_pool(self, pool: str) -> int:
        if pool == GLOBAL_POOL and len(self.pools) <= 1:
            return self.job_states[JobState.IDLE]
        return sum(
            1
            for s in self.schedds.values()
            if pool in s.pools
            for _ in self.idle_jobs(s, pool)
        )


__all__ = [
    "DEFAULT_GRACE_MS",
    "GLOBAL_POOL",
    "Glidein",
    "GlideinSpec",
    "Job",
    "JobState",
    "Pool",
    "PoolListener",
    "PoolModel",
    "PoolRole",
    "Schedd",
    "Slot",
    "SlotState",
    "Startd",
    "schedd_capacity",
]
