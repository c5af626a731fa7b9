# src/simpool/simulation.py
"""
Wiring of one simulation run: kernel, pool model, central managers,
providers, workload streams and the metrics recorder.
"""
from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional

from simpool.config import ProviderKind, ScenarioConfig
from simpool.errors import InvariantViolation
from simpool.lib.central_manager import CentralManager, calibrate_collector
from simpool.lib.kernel import Kernel, SimTime
from simpool.lib.metrics import MetricsFrame, MetricsRecorder, SeriesLayout, summarize
from simpool.lib.pool import (
    GLOBAL_POOL,
    JobState,
    PoolModel,
    PoolRole,
    SlotState,
    schedd_capacity,
)
from simpool.lib.provisioning import FederationLink, FlockRouter, Provider
from simpool.lib.workload import WorkloadStream

logger = logging.getLogger(__name__)


def resolve_config(
    cfg: ScenarioConfig, seed: Optional[int] = None, horizon: Optional[SimTime] = None
) -> ScenarioConfig:
    """
    Apply overrides and collector calibration. The result re-runs identically
    when saved and loaded again.
    """
    doc: Dict[str, Any] = cfg.model_dump(mode="python")
    if seed is not None:
        doc["seed"] = seed
    if horizon is not None:
        doc["horizon_ms"] = horizon
    for pool in doc["pools"]:
        cal = pool["collector"].get("calibrate")
        if cal:
            pool["collector"]["cost_update_ms"] = calibrate_collector(
                cal["target_slots"],
                cal["mean_job_duration_ms"],
                pool["heartbeat_interval_ms"],
                pool["update_filtering"],
            )
            pool["collector"]["calibrate"] = None
    return ScenarioConfig.model_validate(doc)


class InvariantChecker:
    """Conservation and capacity checks run on every sampled frame."""

    def __init__(self, sim: "Simulation"):
        self.sim = sim
        self.frames_checked = 0

    def violations(self, frame: MetricsFrame) -> List[str]:
        model = self.sim.model
        out: List[str] = []
        js = model.job_states
        total = js[JobState.IDLE] + js[JobState.RUNNING] + js[JobState.COMPLETED]
        if total != model.submitted:
            out.append(f"job conservation: {total} jobs accounted, {model.submitted} submitted")

        counts = {s: 0 for s in SlotState}
        bound = 0
        for slot in model.slots.values():
            counts[slot.state] += 1
            if slot.job_id is not None:
                bound += 1
            elif slot.state is SlotState.BUSY:
                out.append(f"slot {slot.id} is Busy without a job")
            if slot.state is SlotState.UNCLAIMED and slot.claimed_by is not None:
                out.append(f"slot {slot.id} is Unclaimed but claimed by schedd {slot.claimed_by}")
            if slot.state in (SlotState.CLAIMED, SlotState.BUSY):
                if not model.startds[slot.startd_id].ccb_registered:
                    out.append(f"slot {slot.id} is {slot.state.value} on a startd without CCB")
        if counts != model.slot_states:
            out.append("slot-state partition: incremental counters disagree with slot states")
        if bound != model.running_jobs:
            out.append(f"{bound} slots hold a job but {model.running_jobs} jobs are running")

        for s in model.schedds.values():
            if len(s.running) > schedd_capacity(s):
                out.append(
                    f"schedd {s.name} runs {len(s.running)} jobs, capacity {schedd_capacity(s)}"
                )
        for pid, cm in self.sim.central_managers.items():
            cap = cm.ccb.max_connections
            if cap is not None and len(cm.ccb.registered) > cap:
                out.append(f"pool {pid}: {len(cm.ccb.registered)} CCB registrations, cap {cap}")
        for p in self.sim.providers:
            in_use = model.cores_in_use.get(p.id, 0)
            live = model.live_cores.get(p.id, 0)
            if not in_use <= live <= model.provisioned_cores.get(p.id, 0):
                out.append(f"provider {p.id}: cores in use {in_use}, live {live}")
            if p.cfg.kind is ProviderKind.GRID and live > p.cfg.pledged_cores:
                out.append(
                    f"provider {p.id}: {live} live cores above the {p.cfg.pledged_cores} pledge"
                )
            if p.cfg.kind is ProviderKind.HPC and p.cfg.allocation_grace_ms == 0:
                i = p.active_window(frame.at)
                limit = p.windows[i].cores if i is not None else 0
                if live > limit:
                    out.append(
                        f"provider {p.id}: {live} live cores outside its allocation ({limit})"
                    )

        if sum(frame.cores.values()) != frame.cores_total:
            out.append("per-provider cores do not sum to the total")
        for name, d in frame.duty.items():
            if not 0.0 <= d <= 1.0:
                out.append(f"duty cycle of {name} is {d}")
        return out

    def check(self, frame: MetricsFrame) -> None:
        found = self.violations(frame)
        self.frames_checked += 1
        if found:
            raise InvariantViolation(f"t={frame.at} ms: " + "; ".join(found))


class Simulation:
    def __init__(self, cfg: ScenarioConfig, trace: bool = False):
        cfg = resolve_config(cfg)
        self.cfg = cfg
        self.kernel = Kernel(cfg.seed, trace=trace)
        self.model = model = PoolModel(self.kernel)
        for p in cfg.pools:
            model.add_pool(p.id, p.role)
        names: List[str] = []
        for sc in cfg.schedds:
            for name in sc.instance_names():
                model.add_schedd(
                    name,
                    memory_capacity_mb=sc.memory_capacity_mb,
                    ram_per_running_job_mb=sc.ram_per_running_job_mb,
                    max_idle_jobs=sc.max_idle_jobs,
                    pools=sc.pools,
                )
                names.append(name)

        self.central_managers: Dict[str, CentralManager] = {}
        self.routers: Dict[str, FlockRouter] = {}
        for p in cfg.pools:
            cm = CentralManager(self.kernel, model, p)
            self.central_managers[p.id] = cm
            if p.role is PoolRole.SUBPOOL and p.federation is not None:
                router = FlockRouter(model, FederationLink(p.id, p.federation.flock_threshold_ms))
                cm.pre_cycle = router
                self.routers[p.id] = router

        self.providers = [Provider(self.kernel, model, pc) for pc in cfg.providers]
        by_name = {s.name: s for s in model.schedds.values()}
        self.streams = [
            WorkloadStream(
                self.kernel, model, sc, [by_name[n] for n in cfg.resolve_targets(sc.targets)]
            )
            for sc in cfg.streams
        ]
        self.layout = SeriesLayout(
            providers=tuple(p.id for p in cfg.providers),
            collectors=tuple(c.name for c in self.central_managers[GLOBAL_POOL].collectors),
            schedds=tuple(names),
        )
        self.checker: Optional[InvariantChecker] = (
            InvariantChecker(self) if cfg.check_invariants else None
        )
        self.recorder = MetricsRecorder(self, cfg.metrics.interval_ms, cfg.metrics.duty_window)
        self._started = False

    def run(self, until: Optional[SimTime] = None) -> List[MetricsFrame]:
        horizon = self.cfg.horizon_ms if until is None else until
        if not self._started:
            self._started = True
            for st in self.streams:
                st.generate_arrivals(horizon)
            for p in self.providers:
                p.start(0)
            for cm in self.central_managers.values():
                cm.start(0)
            self.recorder.start(horizon)
        logger.info(
            "running %s to t=%d ms (seed %d, %d schedds, %d providers, %d streams)",
            self.cfg.name, horizon, self.cfg.seed, len(self.model.schedds),
            len(self.providers), len(self.streams),
        )
        self.kernel.run_until(horizon)
        logger.info(
            "%s finished: %d events, %d jobs running, %d completed",
            self.cfg.name, self.kernel.processed, self.model.running_jobs,
            self.model.job_states[JobState.COMPLETED],
        )
        return self.recorder.frames

    @property
    def frames(self) -> List[MetricsFrame]:
        return self.recorder.frames

    def summary(self) -> Dict[str, Any]:
        return summarize(self, self.recorder.frames)


__all__ = ["InvariantChecker", "Simulation", "resolve_config"]
