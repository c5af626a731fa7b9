from __future__ import annotations

import pytest

from simpool.config import PoolConfig
from simpool.errors import InvalidParameter
from simpool.lib.central_manager import (
    Ccb,
    CcbOutcome,
    CentralManager,
    Collector,
    IngestResult,
    Negotiator,
    QueryKind,
    QueryOrigin,
    QueryPriority,
    SecondaryCollector,
    Transport,
    UpdateMessage,
    WorkItem,
    calibrate_collector,
    ccb_register,
    duty_cycle,
    filter_update,
    ingest_update,
    route_query,
)
from simpool.lib.kernel import HOUR, MINUTE, SECOND, Kernel
from simpool.lib.pool import GlideinSpec, PoolModel, PoolRole, SlotState


def _cm(**pool_kw):
    kernel = Kernel(seed=2)
    model = PoolModel(kernel)
    model.add_pool("global", PoolRole.GLOBAL)
    cm = CentralManager(kernel, model, PoolConfig(**pool_kw))
    return kernel, model, cm


def _udp(slot_id: int, at: float, state=SlotState.UNCLAIMED) -> UpdateMessage:
    return UpdateMessage(slot_id, state, at, Transport.UDP)


# ---------------------------------------------------------------------
# Filtering and calibration
# ---------------------------------------------------------------------
@pytest.mark.parametrize(
    "before,after,enabled,sent",
    [
        (SlotState.UNCLAIMED, SlotState.BUSY, False, True),
        (SlotState.BUSY, SlotState.UNCLAIMED, False, True),
        (SlotState.UNCLAIMED, SlotState.BUSY, True, False),
        (SlotState.BUSY, SlotState.UNCLAIMED, True, True),
        (SlotState.BUSY, SlotState.RETIRING, True, False),
        (SlotState.BUSY, SlotState.BUSY, True, True),
    ],
)
def test_filter_update(before, after, enabled, sent):
    assert filter_update((before, after), enabled) is sent


def test_calibration_puts_offered_load_at_one():
    c = calibrate_collector(8_000, 6 * HOUR, 5 * MINUTE, True)
    assert c == pytest.approx(36.986, rel=1e-3)
    load = 8_000 * c * (1 / (5 * MINUTE) + 1 / (6 * HOUR))
    assert load == pytest.approx(1.0)
    # without filtering a job turnover costs two updates, so the budget per update shrinks
    assert calibrate_collector(8_000, 6 * HOUR, 5 * MINUTE, False) < c


def test_calibration_rejects_non_positive_inputs():
    with pytest.raises(InvalidParameter):
        calibrate_collector(0, HOUR, MINUTE, True)


# ---------------------------------------------------------------------
# Collector server
# ---------------------------------------------------------------------
def test_fifo_service_and_duty_cycle():
    c = Collector("top", cost_update=30.0)
    assert c.submit(WorkItem(0.0, 30.0, "update")) is IngestResult.PROCESSED
    assert c.submit(WorkItem(10.0, 30.0, "update")) is IngestResult.QUEUED
    c.advance(100.0)
    assert c.processed == 2
    assert c.duty_cycle(100.0, 100.0) == pytest.approx(0.6)
    assert c.duty_cycle(50.0, 100.0) == pytest.approx(0.2)


def test_duty_cycle_is_clipped_and_validated():
    c = Collector("top")
    c.submit(WorkItem(0.0, 500.0, "update"))
    assert duty_cycle(c, 100.0, 100.0) == 1.0
    with pytest.raises(InvalidParameter):
        c.duty_cycle(0.0, 100.0)


def test_view_keeps_the_newest_update():
    c = Collector("top", cost_update=1.0)
    ingest_update(c, _udp(7, 5.0, SlotState.BUSY), 5.0)
    ingest_update(c, _udp(7, 2.0, SlotState.UNCLAIMED), 6.0)
    c.advance(20.0)
    assert c.view[7][0] is SlotState.BUSY
    assert 7 not in c.unclaimed


def test_dead_slot_leaves_the_view_for_good():
    c = Collector("top", cost_update=1.0)
    ingest_update(c, _udp(3, 0.0), 0.0)
    ingest_update(c, _udp(3, 1.0, SlotState.DEAD), 1.0)
    ingest_update(c, _udp(3, 2.0), 2.0)
    c.advance(10.0)
    assert 3 not in c.view
    assert 3 not in c.unclaimed


def test_udp_buffer_overflow_drops_half_at_double_load():
    small = Collector("top", cost_update=2.0, udp_buffer_capacity=10)
    large = Collector("top", cost_update=2.0, udp_buffer_capacity=1_000_000)
    n = 10_000
    for t in range(n):
        ingest_update(small, _udp(t, float(t)), float(t))
        ingest_update(large, _udp(t, float(t)), float(t))
    assert small.drops / n == pytest.approx(0.5, abs=0.05)
    assert large.drops == 0


def test_tcp_messages_are_never_dropped():
    c = Collector("top", cost_update=5.0, udp_buffer_capacity=1)
    for t in range(20):
        c.advance(float(t))
        assert c.submit(WorkItem(float(t), 5.0, "register")) is not IngestResult.DROPPED
    assert c.drops == 0


def test_high_priority_queries_jump_the_update_backlog():
    c = Collector("top", cost_update=10.0, cost_query_hi=50.0, cost_query_lo=200.0)
    for i in range(10):
        c.submit(WorkItem(0.0, 10.0, "update"))
    # 10 ms in service, 90 ms queued
    assert c.query(QueryPriority.HIGH, 0.0, jump_queue=False) == pytest.approx(150.0)
    c2 = Collector("top", cost_update=10.0, cost_query_hi=50.0)
    for i in range(10):
        c2.submit(WorkItem(0.0, 10.0, "update"))
    assert c2.query(QueryPriority.HIGH, 0.0, jump_queue=True) == pytest.approx(60.0)


def test_query_kind_priority_follows_origin():
    assert QueryKind.for_origin(QueryOrigin.NEGOTIATOR).priority is QueryPriority.HIGH
    assert QueryKind.for_origin(QueryOrigin.MONITORING).priority is QueryPriority.LOW
    with pytest.raises(InvalidParameter):
        QueryKind(QueryPriority.LOW, QueryOrigin.NEGOTIATOR)


def test_secondary_batches_updates_into_digests():
    sec = SecondaryCollector("secondary_0", 1.0, 0.1, batch_factor=5, max_delay=SECOND)
    for i in range(12):
        ingest_update(sec, _udp(i, float(i)), float(i))
    sec.advance(100.0)
    digests = sec.drain()
    assert [len(d.payload) for d in digests] == [5, 5]
    assert digests[0].cost == pytest.approx(0.5)
    assert digests[0].kind == "digest"
    # the remaining two leave after max_delay
    sec.advance(100.0 + 2 * SECOND)
    [late] = sec.drain()
    assert len(late.payload) == 2


# ---------------------------------------------------------------------
# CCB and negotiator
# ---------------------------------------------------------------------
def test_ccb_cap_rejects_new_connections():
    ccb = Ccb(max_connections=2)
    assert ccb_register(ccb, 1) is CcbOutcome.REGISTERED
    assert ccb_register(ccb, 2) is CcbOutcome.REGISTERED
    assert ccb_register(ccb, 3) is CcbOutcome.REJECTED
    assert ccb_register(ccb, 1) is CcbOutcome.REGISTERED
    ccb.release(2)
    assert ccb_register(ccb, 3) is CcbOutcome.REGISTERED
    assert ccb.rejections == 1


def test_threads_divide_the_match_component():
    one = Negotiator(threads=1, match_cost_per_candidate=1.0)
    four = Negotiator(threads=4, match_cost_per_candidate=1.0)
    m1, d1 = one.cycle_duration(50.0, 10_000)
    m4, d4 = four.cycle_duration(50.0, 10_000)
    assert m1 == 4 * m4 == 10_000
    assert d1 == 10_050 and d4 == 2_550
    assert Negotiator().cycle_duration(0.0, 0)[1] == 1


# ---------------------------------------------------------------------
# Central manager wired to a pool
# ---------------------------------------------------------------------
def test_capped_ccb_keeps_startds_out_of_matchmaking():
    kernel, model, cm = _cm(ccb={"max_connections": 2})
    for _ in range(3):
        model.spawn_glidein(GlideinSpec(provider="grid"), 0)
    s = model.add_schedd("s0", pools=["global"])
    for _ in range(5):
        model.new_job(s, 1, 0, 10 * HOUR, 0)
    cm.start(0)
    kernel.run_until(5 * MINUTE)
    assert len(cm.ccb.registered) == 2
    assert cm.counters.ccb_rejections >= 1
    assert model.running_jobs == 2


def test_negotiation_is_round_robin_across_schedds():
    kernel, model, cm = _cm()
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=4), 0)
    a = model.add_schedd("a")
    b = model.add_schedd("b")
    for s in (a, b):
        for _ in range(5):
            model.new_job(s, 1, 0, 10 * HOUR, 0)
    cm.start(0)
    kernel.run_until(3 * MINUTE)
    assert len(a.running) == 2
    assert len(b.running) == 2


def test_schedd_headroom_limits_matches():
    kernel, model, cm = _cm()
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=10), 0)
    s = model.add_schedd("s", memory_capacity_mb=3)
    for _ in range(10):
        model.new_job(s, 1, 0, 10 * HOUR, 0)
    cm.start(0)
    kernel.run_until(10 * MINUTE)
    assert len(s.running) == 3
    assert cm.counters.capacity_refusals == 0


def test_claim_on_a_slot_taken_meanwhile_is_stale():
    kernel, model, cm = _cm()
    [sid] = model.spawn_glidein(GlideinSpec(provider="grid"), 0)
    s = model.add_schedd("s")
    first = model.new_job(s, 1, 0, HOUR, 0)
    second = model.new_job(s, 1, 0, HOUR, 0)
    kernel.run_until(10)
    report = cm.negotiate_cycle(cm.negotiators[0], 10)
    assert report.matches == 1
    slot = model.slots[sid]
    # the slot is taken between snapshot and claim
    model.claim_slot(slot, s, 10)
    model.start_job(s, second, slot, 10)
    kernel.run_until(10 + report.duration)
    assert cm.counters.stale_claims == 1
    assert first.state.value == "Idle"
    assert s.pending_matches == 0


def test_registration_refused_while_collector_is_backlogged():
    kernel, model, cm = _cm(collector={"cost_update_ms": 10_000.0})
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=4), 0)
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=4), 0)
    assert cm.counters.registrations == 1
    assert cm.counters.registration_refusals == 1
    refused = model.startds[1]
    assert not refused.collector_registered
    kernel.run_until(2 * MINUTE)
    assert refused.collector_registered


def test_filtering_halves_transition_updates():
    for filtering, expected in ((False, 2), (True, 1)):
        kernel, model, cm = _cm(update_filtering=filtering)
        model.spawn_glidein(GlideinSpec(provider="grid"), 0)
        s = model.add_schedd("s")
        model.new_job(s, 1, 0, 10 * MINUTE, 0)
        cm.start(0)
        kernel.run_until(30 * MINUTE)
        assert model.jobs[0].state.value == "Completed"
        assert cm.counters.transitions == expected


def test_successful_match_posts_a_claim_record():
    kernel, model, cm = _cm()
    [sid] = model.spawn_glidein(GlideinSpec(provider="grid"), 0)
    s = model.add_schedd("s")
    model.new_job(s, 1, 0, 10 * HOUR, 0)
    cm.start(0)
    kernel.run_until(2 * MINUTE)
    cm.sync(kernel.clock)
    assert cm.counters.match_records == 1
    assert sid not in cm.top.unclaimed


def test_priority_routing_sends_low_queries_to_secondaries():
    _, _, cm = _cm(secondary_collectors={"count": 2}, priority_query_routing=True)
    low = QueryKind.for_origin(QueryOrigin.MONITORING)
    high = QueryKind.for_origin(QueryOrigin.NEGOTIATOR)
    assert route_query(cm, high) == "top"
    assert [route_query(cm, low) for _ in range(3)] == ["secondary_0", "secondary_1", "secondary_0"]
    _, _, plain = _cm(secondary_collectors={"count": 2})
    assert route_query(plain, low) == "top"


def test_secondaries_take_update_load_off_the_top():
    kernel, model, cm = _cm(secondary_collectors={"count": 2, "batch_factor": 10})
    for _ in range(20):
        model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=5), 0)
    kernel.run_until(HOUR)
    cm.sync(HOUR)
    assert cm.top.busy_by_kind.get("heartbeat", 0.0) == 0.0
    assert cm.top.busy_by_kind["digest"] > 0
    assert len(cm.top.view) == 100


def test_zero_cost_records_do_not_hold_a_buffer_slot():
    c = Collector("top", cost_update=5.0, udp_buffer_capacity=2)
    assert ingest_update(c, _udp(1, 0.0), 0.0) is IngestResult.PROCESSED
    record = WorkItem(0.0, 0.0, "match", (_udp(2, 0.0, SlotState.CLAIMED),), Transport.UDP)
    assert c.submit(record) is IngestResult.QUEUED
    assert c.udp_in_system == 1
    assert ingest_update(c, _udp(3, 0.0), 0.0) is IngestResult.QUEUED
    assert c.drops == 0
    c.advance(20.0)
    assert c.udp_in_system == 0
    assert c.view[2][0] is SlotState.CLAIMED


def test_zero_cost_record_is_still_lost_on_a_full_buffer():
    c = Collector("top", cost_update=5.0, udp_buffer_capacity=1)
    ingest_update(c, _udp(1, 0.0), 0.0)
    record = WorkItem(0.0, 0.0, "match", (_udp(2, 0.0, SlotState.CLAIMED),), Transport.UDP)
    assert c.submit(record) is IngestResult.DROPPED
    assert c.last_drop == 0.0


def test_udp_pool_refuses_registration_only_while_shedding():
    kernel, model, cm = _cm(
        udp_transport={"enabled": True, "buffer": 1},
        collector={"cost_update_ms": 10_000.0},
        heartbeat_interval_ms=100 * HOUR,
    )
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=4), 0)
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=4), 0)
    # a long backlog alone does not refuse a UDP pool's startds
    assert cm.top.backlog(0) > 30 * SECOND
    assert cm.counters.registrations == 2
    assert cm.counters.registration_refusals == 0
    ingest_update(cm.top, _udp(100, 0.0), 0.0)
    assert ingest_update(cm.top, _udp(101, 0.0), 0.0) is IngestResult.DROPPED
    model.spawn_glidein(GlideinSpec(provider="grid", slots_per_startd=4), 0)
    assert cm.counters.registration_refusals == 1
    late = model.startds[2]
    assert not late.collector_registered
    kernel.run_until(2 * MINUTE)
    assert late.collector_registered
