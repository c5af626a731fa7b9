# src/simpool/lib/central_manager.py
"""
Central-manager daemons of one pool: collectors, CCB and negotiators.

Collectors are single FIFO servers advanced lazily: work items carry an
arrival time and a service cost and are only resolved when somebody looks
at the collector (an arrival, a query, a metrics sample). Times inside a
collector are real-valued milliseconds so sub-millisecond calibrated costs
stay exact; the kernel clock stays integral.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Set, Tuple

from sortedcontainers import SortedList, SortedSet

from simpool.config import PoolConfig
from simpool.errors import CapacityExceeded, InvalidParameter, SimpoolError
from simpool.lib.kernel import EventRecord, Kernel, SimTime
from simpool.lib.pool import (
    JobState,
    PoolListener,
    PoolModel,
    Slot,
    SlotState,
    Startd,
)

logger = logging.getLogger(__name__)


class Transport(str, Enum):
    UDP = "UDP"
    TCP = "TCP"


class CollectorRole(str, Enum):
    TOP = "Top"
    SECONDARY = "Secondary"


class QueryPriority(str, Enum):
    HIGH = "High"
    LOW = "Low"


class QueryOrigin(str, Enum):
    NEGOTIATOR = "Negotiator"
    MONITORING = "Monitoring"
    OTHER = "Other"


class IngestResult(str, Enum):
    PROCESSED = "Processed"
    QUEUED = "Queued"
    DROPPED = "Dropped"


class CcbOutcome(str, Enum):
    REGISTERED = "Registered"
    REJECTED = "Rejected"


@dataclass(frozen=True, slots=True)
class QueryKind:
    priority: QueryPriority
    origin: QueryOrigin

    def __post_init__(self) -> None:
        negotiator = self.origin is QueryOrigin.NEGOTIATOR
        expected = QueryPriority.HIGH if negotiator else QueryPriority.LOW
        if self.priority is not expected:
            raise InvalidParameter(f"{self.origin.value} queries are {expected.value} priority")

    @classmethod
    def for_origin(cls, origin: QueryOrigin) -> "QueryKind":
        prio = QueryPriority.HIGH if origin is QueryOrigin.NEGOTIATOR else QueryPriority.LOW
        return cls(prio, origin)


@dataclass(frozen=True, slots=True)
class UpdateMessage:
    slot_id: int
    advertised_state: SlotState
    emitted_at: float
    transport: Transport = Transport.UDP


# kinds of collector work, as tallied in busy_by_kind
WORK_KINDS = (
    "update", "invalidate", "register", "heartbeat", "match", "digest", "query_hi", "query_lo",
)


@dataclass(slots=True)
class WorkItem:
    arrival: float
    cost: float
    kind: str
    payload: Tuple[UpdateMessage, ...] = ()
    transport: Transport = Transport.TCP
    buffered: bool = False


# ---------------------------------------------------------------------
# Transition filtering and calibration
# ---------------------------------------------------------------------
def filter_update(transition: Tuple[SlotState, SlotState], filtering_enabled: bool) -> bool:
    """
    Whether a slot transition is advertised to the collector.

    With filtering on only transitions into Unclaimed and heartbeats (a slot
    re-advertising its current state) go out.
    """
    if not filtering_enabled:
        return True
    before, after = transition
    return after is SlotState.UNCLAIMED or before is after


def calibrate_collector(
    target_slots: int,
    mean_job_duration: float,
    heartbeat_interval: float,
    filtering: bool,
) -> float:
    """Per-update service cost (ms) that makes the offered load exactly 1.0 at target_slots."""
    if target_slots <= 0 or mean_job_duration <= 0 or heartbeat_interval <= 0:
        raise InvalidParameter(
            "calibration needs positive target_slots, mean_job_duration and heartbeat_interval"
        )
    per_turnover = 1 if filtering else 2
    r_slot = 1.0 / heartbeat_interval + per_turnover / mean_job_duration
    return 1.0 / (target_slots * r_slot)


# ---------------------------------------------------------------------
# Collector
# ---------------------------------------------------------------------
class Collector:
    def __init__(
        self,
        name: str,
        role: CollectorRole = CollectorRole.TOP,
        cost_update: float = 1.0,
        cost_query_hi: float = 50.0,
        cost_query_lo: float = 200.0,
        udp_buffer_capacity: Optional[int] = None,
        retention: float = 3_600_000.0,
    ):
        if cost_update < 0 or cost_query_hi < 0 or cost_query_lo < 0:
            raise InvalidParameter(f"collector {name}: service costs must be >= 0")
        self.name = name
        self.role = role
        self.cost_update = float(cost_update)
        self.cost_query_hi = float(cost_query_hi)
        self.cost_query_lo = float(cost_query_lo)
        self.udp_buffer_capacity = udp_buffer_capacity
        self.retention = float(retention)

        # slot_id -> (state, as_of); slots seen Dead are kept as tombstones
        self.view: Dict[int, Tuple[SlotState, float]] = {}
        self.view_counts: Dict[SlotState, int] = {s: 0 for s in SlotState}
        self.unclaimed: SortedSet = SortedSet()
        self._tombstones: Set[int] = set()

        self._queue: Deque[WorkItem] = deque()
        self._hi: Deque[WorkItem] = deque()
        self._queued_cost = 0.0
        self._hi_cost = 0.0
        self._current: Optional[WorkItem] = None
        self._start = 0.0
        self._end = 0.0
        self.udp_in_system = 0
        self.clock = 0.0

        self._busy: Deque[List[float]] = deque()
        self.busy_by_kind: Dict[str, float] = {}
        self.processed = 0
        self.drops = 0
        self.last_drop: Optional[float] = None
        self.max_queue = 0

    # --- server ------------------------------------------------------
    def advance(self, t: float) -> None:
        """Complete every item whose service ends at or before t."""
        while self._current is not None and self._end <= t:
            self._tick(self._end)
            item, start, end = self._current, self._start, self._end
            self._current = None
            self._finish(item, start, end)
            nxt = self._next_item()
            if nxt is not None:
                self._begin(nxt, max(end, nxt.arrival))
        self._tick(t)
        if t > self.clock:
            self.clock = t

    def submit(self, item: WorkItem, priority: bool = False) -> IngestResult:
        if item.transport is Transport.UDP:
            cap = self.udp_buffer_capacity
            if cap is not None and self.udp_in_system >= cap:
                self.drops += 1
                self.last_drop = item.arrival
                return IngestResult.DROPPED
            # zero-cost bookkeeping never holds a buffer slot
            if item.cost > 0:
                item.buffered = True
                self.udp_in_system += 1
        if self._current is None:
            self._begin(item, max(item.arrival, self.clock))
            return IngestResult.PROCESSED
        if priority:
            self._hi.append(item)
            self._hi_cost += item.cost
        else:
            self._queue.append(item)
            self._queued_cost += item.cost
        depth = len(self._queue) + len(self._hi)
        if depth > self.max_queue:
            self.max_queue = depth
        return IngestResult.QUEUED

    def _next_item(self) -> Optional[WorkItem]:
        if self._hi:
            item = self._hi.popleft()
            self._hi_cost -= item.cost
            return item
        if self._queue:
            item = self._queue.popleft()
            self._queued_cost -= item.cost
            return item
        return None

    def _begin(self, item: WorkItem, start: float) -> None:
        self._current = item
        self._start = start
        self._end = start + item.cost

    def _finish(self, item: WorkItem, start: float, end: float) -> None:
        if item.buffered:
            self.udp_in_system -= 1
        if end > start:
            busy = self._busy
            if busy and busy[-1][1] >= start:
                busy[-1][1] = end
            else:
                busy.append([start, end])
            while busy and busy[0][1] < end - self.retention:
                busy.popleft()
        self.busy_by_kind[item.kind] = self.busy_by_kind.get(item.kind, 0.0) + item.cost
        self.processed += 1
        self._apply(item, end)

    def _tick(self, t: float) -> None:
        pass

    # --- view --------------------------------------------------------
    def _apply(self, item: WorkItem, at: float) -> None:
        for msg in item.payload:
            self.set_view(msg)

    def set_view(self, msg: UpdateMessage) -> bool:
        sid = msg.slot_id
        if sid in self._tombstones:
            return False
        old = self.view.get(sid)
        if old is not None:
            if old[1] > msg.emitted_at:
                return False
            self.view_counts[old[0]] -= 1
            if old[0] is SlotState.UNCLAIMED:
                self.unclaimed.discard(sid)
        if msg.advertised_state is SlotState.DEAD:
            self.view.pop(sid, None)
            self._tombstones.add(sid)
            return True
        self.view[sid] = (msg.advertised_state, msg.emitted_at)
        self.view_counts[msg.advertised_state] += 1
        if msg.advertised_state is SlotState.UNCLAIMED:
            self.unclaimed.add(sid)
        return True

    # --- measurements ------------------------------------------------
    def residual(self, t: float) -> float:
        return max(0.0, self._end - t) if self._current is not None else 0.0

    def backlog(self, t: float) -> float:
        """Work (ms) ahead of an item arriving now."""
        return self.residual(t) + self._queued_cost + self._hi_cost

    @property
    def queue_depth(self) -> int:
        return len(self._queue) + len(self._hi) + (1 if self._current is not None else 0)

    def duty_cycle(self, window: float, at: float) -> float:
        if window <= 0:
            raise InvalidParameter(f"duty-cycle window must be > 0 (got {window})")
        lo = at - window
        busy = 0.0
        for start, end in reversed(self._busy):
            if end <= lo:
                break
            busy += max(0.0, min(end, at) - max(start, lo))
        if self._current is not None:
            busy += max(0.0, min(self._end, at) - max(self._start, lo))
        return min(1.0, busy / window)

    def query(self, priority: QueryPriority, at: float, jump_queue: bool) -> float:
        """Enqueue a query and return its response time in ms."""
        hi = priority is QueryPriority.HIGH
        cost = self.cost_query_hi if hi else self.cost_query_lo
        wait = self.residual(at) + self._hi_cost if jump_queue else self.backlog(at)
        kind = "query_hi" if hi else "query_lo"
        self.submit(WorkItem(at, cost, kind), priority=jump_queue)
        return wait + cost


def ingest_update(c: Collector, m: UpdateMessage, at: float) -> IngestResult:
    c.advance(at)
    return c.submit(WorkItem(at, c.cost_update, "update", (m,), m.transport))


def duty_cycle(c: Collector, window: float, at: Optional[float] = None) -> float:
    t = c.clock if at is None else at
    c.advance(t)
    return c.duty_cycle(window, t)


class SecondaryCollector(Collector):
    """Absorbs a share of slot updates and forwards batched digests to the top collector."""

    def __init__(
        self,
        name: str,
        cost_update: float,
        digest_cost_per_entry: float,
        batch_factor: int,
        max_delay: float,
        **kw: Any,
    ):
        super().__init__(name, CollectorRole.SECONDARY, cost_update, **kw)
        self.digest_cost_per_entry = digest_cost_per_entry
        self.batch_factor = batch_factor
        self.max_delay = float(max_delay)
        self._pending: List[UpdateMessage] = []
        self._pending_since = 0.0
        self.outbox: List[WorkItem] = []
        self.digests = 0

    def _apply(self, item: WorkItem, at: float) -> None:
        for msg in item.payload:
            if self.set_view(msg):
                if not self._pending:
                    self._pending_since = at
                self._pending.append(msg)
        if len(self._pending) >= self.batch_factor:
            self._flush(at)

    def _tick(self, t: float) -> None:
        if self._pending and self._pending_since + self.max_delay <= t:
            self._flush(self._pending_since + self.max_delay)

    def _flush(self, at: float) -> None:
        entries = tuple(self._pending)
        self._pending = []
        self.outbox.append(
            WorkItem(
                at, len(entries) * self.digest_cost_per_entry, "digest", entries, Transport.TCP
            )
        )
        self.digests += 1

    def drain(self) -> List[WorkItem]:
        out, self.outbox = self.outbox, []
        return out


# ---------------------------------------------------------------------
# CCB
# ---------------------------------------------------------------------
@dataclass(slots=True)
class Ccb:
    max_connections: Optional[int] = None
    on_dedicated_host: bool = False
    registered: Set[int] = field(default_factory=set)
    rejections: int = 0

    def release(self, startd_id: int) -> None:
        self.registered.discard(startd_id)


def ccb_register(ccb: Ccb, startd_id: int) -> CcbOutcome:
    if startd_id in ccb.registered:
        return CcbOutcome.REGISTERED
    if ccb.max_connections is not None and len(ccb.registered) >= ccb.max_connections:
        ccb.rejections += 1
        return CcbOutcome.REJECTED
    ccb.registered.add(startd_id)
    return CcbOutcome.REGISTERED


# ---------------------------------------------------------------------
# Negotiator
# ---------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class MatchReport:
    negotiator: int
    started_at: SimTime
    matches: int
    candidates: int
    query_ms: float
    match_ms: int
    duration: SimTime
    stale_failures: int = 0
    capacity_refusals: int = 0


@dataclass(slots=True)
class Negotiator:
    index: int = 0
    partitions: int = 1
    threads: int = 1
    match_cost_per_candidate: float = 1.0
    cycle_delay: SimTime = 60_000
    busy: bool = False
    cycles: int = 0
    last_cycle_duration: SimTime = 0
    last_report: Optional[MatchReport] = None

    def cycle_duration(self, query_ms: float, candidates: int) -> Tuple[int, SimTime]:
        """(match component, whole cycle) for a scan of `candidates` jobs."""
        match_ms = math.ceil(candidates * self.match_cost_per_candidate / self.threads)
        return match_ms, max(1, math.ceil(query_ms) + match_ms)


# (job id, attempt, slot id, schedd id)
Pairing = Tuple[int, int, int, int]


@dataclass(slots=True)
class CmCounters:
    transitions: int = 0
    filtered: int = 0
    heartbeats: int = 0
    invalidations: int = 0
    match_records: int = 0
    registrations: int = 0
    registration_refusals: int = 0
    ccb_rejections: int = 0
    matches: int = 0
    stale_claims: int = 0
    capacity_refusals: int = 0
    cycles: int = 0
    queries_hi: int = 0
    queries_lo: int = 0


class CentralManager(PoolListener):
    """Collector tree, CCB and negotiators of one pool, wired to the pool model."""

    def __init__(self, kernel: Kernel, model: PoolModel, cfg: PoolConfig):
        self.kernel = kernel
        self.model = model
        self.cfg = cfg
        self.pool_id = cfg.id
        self.filtering = cfg.update_filtering
        udp = cfg.udp_transport
        self.transport = Transport.UDP if udp.enabled else Transport.TCP
        cap = udp.buffer if udp.enabled else None
        c = cfg.collector
        self.top = Collector(
            "top",
            CollectorRole.TOP,
            c.cost_update_ms,
            c.cost_query_hi_ms,
            c.cost_query_lo_ms,
            cap,
            c.retention_ms,
        )
        sec = cfg.secondary_collectors
        self.secondaries: List[SecondaryCollector] = [
            SecondaryCollector(
                f"secondary_{i}",
                c.cost_update_ms,
                c.cost_update_ms / sec.batch_factor,
                sec.batch_factor,
                sec.max_delay_ms,
                cost_query_hi=c.cost_query_hi_ms,
                cost_query_lo=c.cost_query_lo_ms,
                udp_buffer_capacity=cap,
                retention=c.retention_ms,
            )
            for i in range(sec.count)
        ]
        self.ccb = Ccb(cfg.ccb.effective_cap, cfg.ccb.separate_ccb_host)
        n = cfg.negotiator
        self.negotiators = [
            Negotiator(i, n.count, n.threads, n.match_cost_per_candidate_ms, n.cycle_delay_ms)
            for i in range(n.count)
        ]
        self.counters = CmCounters()
        # hook run at the start of every cycle with the viewed-Unclaimed count
        self.pre_cycle: Optional[Callable[[int, SimTime], None]] = None
        self._rr = 0
        self._seen_drop = False
        self._seen_refusal = False
        self._seen_ccb_reject = False

        self._kind = f"cm[{self.pool_id}]"
        kernel.on(f"{self._kind}.heartbeat", self._on_heartbeat)
        kernel.on(f"{self._kind}.collector_retry", self._on_collector_retry)
        kernel.on(f"{self._kind}.ccb_retry", self._on_ccb_retry)
        kernel.on(f"{self._kind}.negotiate", self._on_negotiate)
        kernel.on(f"{self._kind}.negotiate_end", self._on_negotiate_end)
        kernel.on(f"{self._kind}.monitor", self._on_monitor)
        model.listeners.append(self)

    def start(self, at: SimTime = 0) -> None:
        for n in self.negotiators:
            self.kernel.at(at, f"{self._kind}.negotiate", n.index)
        if self.cfg.monitor_queries > 0:
            self.kernel.at(at + self.cfg.monitor_query_interval_ms, f"{self._kind}.monitor")

    # --- collectors --------------------------------------------------
    @property
    def collectors(self) -> List[Collector]:
        return [self.top, *self.secondaries]

    def collector(self, name: str) -> Collector:
        for c in self.collectors:
            if c.name == name:
                return c
        raise KeyError(name)

    def home(self, startd_id: int) -> Collector:
        if self.secondaries:
            return self.secondaries[startd_id % len(self.secondaries)]
        return self.top

    def sync(self, at: float) -> None:
        """Bring every collector to `at`, feeding secondary digests to the top in time order."""
        digests: List[Tuple[float, int, WorkItem]] = []
        for i, sec in enumerate(self.secondaries):
            sec.advance(at)
            digests.extend((d.arrival, i, d) for d in sec.drain())
        digests.sort(key=lambda e: (e[0], e[1]))
        for arrival, _, item in digests:
            self.top.advance(arrival)
            self.top.submit(item)
        self.top.advance(at)

    def _reach(self, c: Collector, at: float) -> None:
        if c is self.top:
            self.sync(at)
        else:
            c.advance(at)

    def _send(self, c: Collector, item: WorkItem) -> IngestResult:
        self._reach(c, item.arrival)
        result = c.submit(item)
        if result is IngestResult.DROPPED and not self._seen_drop:
            self._seen_drop = True
            logger.info(
                "pool %s: collector %s dropped its first UDP message at t=%d ms",
                self.pool_id, c.name, int(item.arrival),
            )
        return result

    def duty(self, name: str, window: float, at: float) -> float:
        self.sync(at)
        return self.collector(name).duty_cycle(window, at)

    @property
    def drops(self) -> int:
        return sum(c.drops for c in self.collectors)

    @property
    def viewed_unclaimed(self) -> int:
        return len(self.top.unclaimed)

    # --- queries -----------------------------------------------------
    def query(self, q: QueryKind, at: SimTime) -> float:
        target = self.collector(route_query(self, q))
        self._reach(target, at)
        if q.priority is QueryPriority.HIGH:
            self.counters.queries_hi += 1
        else:
            self.counters.queries_lo += 1
        jump = self.cfg.priority_query_routing and q.priority is QueryPriority.HIGH
        return target.query(q.priority, at, jump)

    def _on_monitor(self, ev: EventRecord) -> None:
        q = QueryKind.for_origin(QueryOrigin.MONITORING)
        for _ in range(self.cfg.monitor_queries):
            self.query(q, ev.fire_at)
        self.kernel.at(ev.fire_at + self.cfg.monitor_query_interval_ms, f"{self._kind}.monitor")

    # --- pool listener -----------------------------------------------
    def _mine(self, pool: str) -> bool:
        return pool == self.pool_id

    def slot_transition(self, slot: Slot, before: SlotState, after: SlotState, at: SimTime) -> None:
        if not self._mine(slot.pool):
            return
        if not self.model.startds[slot.startd_id].collector_registered:
            return
        if not filter_update((before, after), self.filtering):
            self.counters.filtered += 1
            return
        msg = UpdateMessage(slot.id, after, at, self.transport)
        item = WorkItem(at, self.top.cost_update, "update", (msg,), self.transport)
        self._send(self.home(slot.startd_id), item)
        self.counters.transitions += 1

    def slot_invalidated(self, slot: Slot, at: SimTime) -> None:
        if not self._mine(slot.pool):
            return
        if not self.model.startds[slot.startd_id].collector_registered:
            return
        msg = UpdateMessage(slot.id, SlotState.DEAD, at, Transport.TCP)
        item = WorkItem(at, self.top.cost_update, "invalidate", (msg,))
        self._send(self.home(slot.startd_id), item)
        self.counters.invalidations += 1

    def startd_spawned(self, startd: Startd, at: SimTime) -> None:
        if not self._mine(startd.pool):
            return
        self._register_ccb(startd, at)
        self._register_collector(startd, at)
        interval = self.cfg.heartbeat_interval_ms
        phase = self.kernel.stream(f"heartbeat.{self.pool_id}").integer(1, interval)
        self.kernel.at(at + phase, f"{self._kind}.heartbeat", startd.id)

    def startd_dead(self, startd: Startd, at: SimTime) -> None:
        if not self._mine(startd.pool):
            return
        self.ccb.release(startd.id)
        startd.ccb_registered = False
        startd.collector_registered = False

    # --- registration ------------------------------------------------
    def _register_ccb(self, startd: Startd, at: SimTime) -> None:
        if not startd.alive or startd.ccb_registered:
            return
        if ccb_register(self.ccb, startd.id) is CcbOutcome.REGISTERED:
            startd.ccb_registered = True
            return
        self.counters.ccb_rejections += 1
        if not self._seen_ccb_reject:
            self._seen_ccb_reject = True
            logger.info(
                "pool %s: CCB rejected its first startd at t=%d ms (%d connections registered)",
                self.pool_id, at, len(self.ccb.registered),
            )
        self.kernel.at(at + self.cfg.ccb.retry_backoff_ms, f"{self._kind}.ccb_retry", startd.id)

    def _register_collector(self, startd: Startd, at: SimTime) -> None:
        if not startd.alive or startd.collector_registered:
            return
        home = self.home(startd.id)
        self._reach(home, at)
        if self._refuses_registration(home, at):
            self.counters.registration_refusals += 1
            if not self._seen_refusal:
                self._seen_refusal = True
                logger.info(
                    "pool %s: collector %s refused its first startd registration at t=%d ms",
                    self.pool_id, home.name, at,
                )
            self.kernel.at(
                at + self.cfg.collector.registration_backoff_ms,
                f"{self._kind}.collector_retry",
                startd.id,
            )
            return
        msgs = self._ads(startd, at, Transport.TCP)
        home.submit(WorkItem(at, home.cost_update * len(msgs), "register", msgs))
        startd.collector_registered = True
        self.counters.registrations += 1

    def _refuses_registration(self, home: Collector, at: SimTime) -> bool:
        """
        A collector refuses new startds while it is overloaded.

        Over UDP that means it has dropped an update within the registration
        timeout; over TCP, that its backlog is longer than the timeout.
        """
        timeout = self.cfg.collector.registration_timeout_ms
        if self.transport is Transport.UDP and home.udp_buffer_capacity is not None:
            return home.last_drop is not None and at - home.last_drop <= timeout
        return home.backlog(at) > timeout

    def _ads(self, startd: Startd, at: SimTime, transport: Transport) -> Tuple[UpdateMessage, ...]:
        slots = self.model.slots
        return tuple(
            UpdateMessage(sid, slots[sid].state, at, transport)
            for sid in startd.slot_ids
            if slots[sid].state is not SlotState.DEAD
        )

    def _on_collector_retry(self, ev: EventRecord) -> None:
        self._register_collector(self.model.startds[ev.target], ev.fire_at)

    def _on_ccb_retry(self, ev: EventRecord) -> None:
        self._register_ccb(self.model.startds[ev.target], ev.fire_at)

    def _on_heartbeat(self, ev: EventRecord) -> None:
        startd = self.model.startds[ev.target]
        if not startd.alive:
            return
        if startd.collector_registered:
            msgs = self._ads(startd, ev.fire_at, self.transport)
            if msgs:
                home = self.home(startd.id)
                cost = home.cost_update * len(msgs)
                item = WorkItem(ev.fire_at, cost, "heartbeat", msgs, self.transport)
                self._send(home, item)
                self.counters.heartbeats += 1
        nxt = ev.fire_at + self.cfg.heartbeat_interval_ms
        self.kernel.at(nxt, f"{self._kind}.heartbeat", startd.id)

    # --- negotiation -------------------------------------------------
    def _on_negotiate(self, ev: EventRecord) -> None:
        self.negotiate_cycle(self.negotiators[ev.target], ev.fire_at)

    def negotiate_cycle(self, n: Negotiator, at: SimTime) -> MatchReport:
        """
        Plan one matchmaking cycle starting at `at`.

        The pairing is computed from the collector view at cycle start; claims
        are attempted when the cycle ends, `duration` ms later.
        """
        if n.busy:
            raise SimpoolError(f"negotiator {n.index} of pool {self.pool_id} is already in a cycle")
        n.busy = True
        query_ms = self.query(QueryKind.for_origin(QueryOrigin.NEGOTIATOR), at)
        if self.pre_cycle is not None:
            self.pre_cycle(self.viewed_unclaimed, at)

        model = self.model
        snapshot = SortedList(
            sid
            for sid in self.top.unclaimed
            if sid % n.partitions == n.index and self._candidate_slot(sid)
        )
        pairs: List[Pairing] = []
        candidates = 0
        scans = []
        for sid in model.pools[self.pool_id].schedd_ids:
            s = model.schedds[sid]
            room = s.capacity - len(s.running) - s.pending_matches
            if room > 0:
                scans.append([s, model.idle_jobs(s, self.pool_id), room])
        while snapshot and scans:
            still: List[Any] = []
            for scan in scans:
                if not snapshot:
                    break
                s, jobs, room = scan
                job = next(jobs, None)
                if job is None:
                    continue
                candidates += 1
                slot_id = self._fit(snapshot, job.req_cores, job.req_memory_mb)
                if slot_id is not None:
                    snapshot.remove(slot_id)
                    pairs.append((job.id, job.attempt, slot_id, s.id))
                    s.pending_matches += 1
                    room -= 1
                    scan[2] = room
                if room > 0:
                    still.append(scan)
            scans = still

        match_ms, duration = n.cycle_duration(query_ms, candidates)
        report = MatchReport(n.index, at, len(pairs), candidates, query_ms, match_ms, duration)
        self.kernel.at(at + duration, f"{self._kind}.negotiate_end", n.index, (pairs, report))
        return report

    def _candidate_slot(self, slot_id: int) -> bool:
        slot = self.model.slots.get(slot_id)
        return slot is not None and self.model.startds[slot.startd_id].ccb_registered

    def _fit(self, snapshot: SortedList, cores: int, memory_mb: int) -> Optional[int]:
        slots = self.model.slots
        for sid in snapshot:
            slot = slots[sid]
            if slot.cores >= cores and slot.memory_mb >= memory_mb:
                return int(sid)
        return None

    def _on_negotiate_end(self, ev: EventRecord) -> None:
        n = self.negotiators[ev.target]
        pairs, planned = ev.payload
        self.finish_cycle(n, pairs, planned, ev.fire_at)

    def finish_cycle(
        self, n: Negotiator, pairs: List[Pairing], planned: MatchReport, at: SimTime
    ) -> MatchReport:
        model = self.model
        matched = stale = refused = 0
        for job_id, attempt, slot_id, schedd_id in pairs:
            s = model.schedds[schedd_id]
            s.pending_matches -= 1
            job = model.jobs[job_id]
            if job.state is not JobState.IDLE or job.attempt != attempt or job.pool != self.pool_id:
                continue
            slot = model.slots[slot_id]
            startd = model.startds[slot.startd_id]
            if not (startd.alive and startd.ccb_registered) or not model.claim_slot(slot, s, at):
                stale += 1
                continue
            try:
                model.start_job(s, job, slot, at)
            except CapacityExceeded:
                model.release_claim(slot, at)
                refused += 1
                continue
            matched += 1
            self._post_match_record(slot, at)

        report = MatchReport(
            n.index,
            planned.started_at,
            matched,
            planned.candidates,
            planned.query_ms,
            planned.match_ms,
            planned.duration,
            stale,
            refused,
        )
        n.busy = False
        n.cycles += 1
        n.last_cycle_duration = report.duration
        n.last_report = report
        c = self.counters
        c.cycles += 1
        c.matches += matched
        c.stale_claims += stale
        c.capacity_refusals += refused
        logger.debug(
            "pool %s negotiator %d: %d matches / %d candidates, %d stale, "
            "query %.1f ms, cycle %d ms",
            self.pool_id, n.index, matched, report.candidates, stale,
            report.query_ms, report.duration,
        )
        self.kernel.at(at + n.cycle_delay, f"{self._kind}.negotiate", n.index)
        return report

    def _post_match_record(self, slot: Slot, at: SimTime) -> None:
        msg = UpdateMessage(slot.id, SlotState.CLAIMED, at, self.transport)
        self._send(self.top, WorkItem(at, 0.0, "match", (msg,), self.transport))
        self.counters.match_records += 1


def route_query(cm: CentralManager, q: QueryKind) -> str:
    """Name of the collector that serves `q`."""
    if q.priority is QueryPriority.HIGH:
        return cm.top.name
    if cm.cfg.priority_query_routing and cm.secondaries:
        target = cm.secondaries[cm._rr % len(cm.secondaries)]
        cm._rr += 1
        return target.name
    return cm.top.name


__all__ = [
    "CcbOutcome",
    "Ccb",
    "CentralManager",
    "CmCounters",
    "Collector",
    "CollectorRole",
    "IngestResult",
    "MatchReport",
    "Negotiator",
    "QueryKind",
    "QueryOrigin",
    "QueryPriority",
    "SecondaryCollector",
    "Transport",
    "UpdateMessage",
    "WORK_KINDS",
    "WorkItem",
    "calibrate_collector",
    "ccb_register",
    "duty_cycle",
    "filter_update",
    "ingest_update",
]
