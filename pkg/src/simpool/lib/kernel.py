# src/simpool/lib/kernel.py
"""
Deterministic discrete-event kernel.

Time is an integer number of milliseconds since the start of the run. Events
are processed in (fire_at, seq) order where seq is a global insertion counter,
so the processing order never depends on anything but the schedule itself.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from simpool.errors import InvalidParameter, SchedulingInPast, SimpoolError

logger = logging.getLogger(__name__)

SimTime = int

SECOND = 1_000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR


@dataclass(frozen=True, slots=True)
class EventRecord:
    fire_at: SimTime
    seq: int
    kind: str
    target: Any = None
    payload: Any = field(default=None, compare=False)


Handler = Callable[[EventRecord], None]


# ---------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------
def _stream_key(stream_id: str) -> int:
    digest = hashlib.blake2b(stream_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class RandomStream:
    """
    One named, independently seeded random sequence.

    PCG64 seeded through a SeedSequence gives the same draws on every
    platform for the same (seed, stream_id).
    """

    __slots__ = ("seed", "stream_id", "_rng", "draws")

    def __init__(self, seed: int, stream_id: str):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream_id = stream_id
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(_stream_key(stream_id),))
        self._rng = np.random.Generator(np.random.PCG64(seq))
        self.draws = 0

    def exponential(self, mean: float) -> float:
        return draw_exponential(self, mean)

    def uniform(self, low: float, high: float) -> float:
        if high < low:
            raise InvalidParameter(f"uniform bounds reversed: [{low}, {high}]")
        self.draws += 1
        return float(self._rng.uniform(low, high))

    def lognormal(self, mean: float, sigma: float) -> float:
        """Log-normal draw parameterised by its arithmetic mean."""
        if mean <= 0 or sigma < 0:
            raise InvalidParameter(f"lognormal needs mean > 0 and sigma >= 0 (got {mean}, {sigma})")
        self.draws += 1
        mu = float(np.log(mean)) - 0.5 * sigma * sigma
        return float(self._rng.lognormal(mu, sigma))

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in [low, high]."""
        self.draws += 1
        return int(self._rng.integers(low, high, endpoint=True))

    def choice(self, values: Sequence[Any], weights: Optional[Sequence[float]] = None) -> Any:
        if not values:
            raise InvalidParameter("choice over an empty sequence")
        self.draws += 1
        if weights is None:
            return values[int(self._rng.integers(0, len(values)))]
        w = np.asarray(weights, dtype=float)
        if len(w) != len(values) or (w < 0).any() or w.sum() <= 0:
            raise InvalidParameter("choice weights must be non-negative, same length, non-zero sum")
        return values[int(self._rng.choice(len(values), p=w / w.sum()))]


def draw_exponential(stream: RandomStream, mean: float) -> float:
    """Positive exponential draw with the given mean."""
    if not mean > 0:
        raise InvalidParameter(f"exponential mean must be > 0 (got {mean})")
    stream.draws += 1
    value = float(stream._rng.exponential(mean))
    # a zero draw is possible in principle; the contract is a positive value
    return value if value > 0.0 else float(np.nextafter(0.0, 1.0))


# ---------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------
class Kernel:
    """Global clock, ordered event queue, handler registry and random streams."""

    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = int(seed)
        self.clock: SimTime = 0
        self._queue: List[Tuple[int, int, EventRecord]] = []
        self._seq = 0
        self._cancelled: Set[int] = set()
        self._queued: Set[int] = set()
        self._handlers: Dict[str, Handler] = {}
        self._streams: Dict[str, RandomStream] = {}
        self.processed = 0
        self._trace = hashlib.sha256() if trace else None

    # --- registry ----------------------------------------------------
    def on(self, kind: str, handler: Handler) -> None:
        if kind in self._handlers:
            raise SimpoolError(f"handler already registered for event kind '{kind}'")
        self._handlers[kind] = handler

    def stream(self, stream_id: str) -> RandomStream:
        s = self._streams.get(stream_id)
        if s is None:
            s = self._streams[stream_id] = RandomStream(self.seed, stream_id)
        return s

    # --- scheduling --------------------------------------------------
    def event(
        self, fire_at: SimTime, kind: str, target: Any = None, payload: Any = None
    ) -> EventRecord:
        """Build a record carrying the next insertion sequence number."""
        self._seq += 1
        return EventRecord(int(fire_at), self._seq, kind, target, payload)

    def schedule(self, ev: EventRecord) -> EventRecord:
        if ev.fire_at < self.clock:
            raise SchedulingInPast(ev.fire_at, self.clock)
        heapq.heappush(self._queue, (ev.fire_at, ev.seq, ev))
        self._queued.add(ev.seq)
        return ev

    def at(
        self, fire_at: SimTime, kind: str, target: Any = None, payload: Any = None
    ) -> EventRecord:
        if fire_at < self.clock:
            raise SchedulingInPast(int(fire_at), self.clock)
        return self.schedule(self.event(fire_at, kind, target, payload))

    def after(
        self, delay: SimTime, kind: str, target: Any = None, payload: Any = None
    ) -> EventRecord:
        if delay < 0:
            raise InvalidParameter(f"negative delay {delay}")
        return self.at(self.clock + int(delay), kind, target, payload)

    def cancel(self, ev: EventRecord) -> None:
        """Drop a queued event; events already run or dropped are ignored."""
        if ev.seq in self._queued:
            self._queued.discard(ev.seq)
            self._cancelled.add(ev.seq)

    def pending(self) -> int:
        return len(self._queue) - len(self._cancelled)

    def peek_time(self) -> Optional[SimTime]:
        while self._queue and self._queue[0][1] in self._cancelled:
            _, seq, _ = heapq.heappop(self._queue)
            self._cancelled.discard(seq)
        return self._queue[0][0] if self._queue else None

    # --- execution ---------------------------------------------------
    def run_until(self, horizon: SimTime) -> int:
        """Process every event with fire_at <= horizon; return how many ran."""
        if horizon < self.clock:
            raise InvalidParameter(f"horizon {horizon} is before the clock ({self.clock})")
        queue = self._queue
        cancelled = self._cancelled
        queued = self._queued
        handlers = self._handlers
        count = 0
        while queue and queue[0][0] <= horizon:
            fire_at, seq, ev = heapq.heappop(queue)
            if seq in cancelled:
                cancelled.discard(seq)
                continue
            queued.discard(seq)
            self.clock = fire_at
            handler = handlers.get(ev.kind)
            if handler is None:
                raise SimpoolError(f"no handler registered for event kind '{ev.kind}'")
            if self._trace is not None:
                self._trace.update(f"{fire_at}:{seq}:{ev.kind}:{ev.target};".encode())
            handler(ev)
            count += 1
        self.clock = horizon
        self.processed += count
        return count

    def trace_digest(self) -> str:
        if self._trace is None:
            raise SimpoolError("kernel was created without tracing")
        return self._trace.hexdigest()


__all__ = [
    "DAY",
    "HOUR",
    "MINUTE",
    "SECOND",
    "EventRecord",
    "Kernel",
    "RandomStream",
    "SimTime",
    "draw_exponential",
]
