# src/simpool/scenarios/library.py
"""
Canned scenarios, each reproducing one scalability claim of the pilot pool:
the schedd memory ceiling, the CCB connection cap, collector saturation,
the optimization ablation, HPC burst provisioning and federation.

Entries are plain JSON-like documents so they can be dumped, edited and fed
back through ``simpool run``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from simpool.config import ScenarioConfig, config_from_dict
from simpool.errors import ConfigError
from simpool.lib.kernel import HOUR, MINUTE

Doc = Dict[str, Any]

_MISSING = object()


@dataclass(frozen=True)
class Expectation:
    """Bounds on one summary.json statistic addressed by a dotted path."""

    stat: str
    min: Optional[float] = None
    max: Optional[float] = None

    def check(self, summary: Mapping[str, Any], label: str = "") -> Optional[str]:
        where = f"[{label}] " if label else ""
        value = lookup(summary, self.stat)
        if value is _MISSING or value is None:
            return f"{where}{self.stat} is not available"
        if self.min is not None and value < self.min:
            return f"{where}{self.stat} = {value} below {self.min}"
        if self.max is not None and value > self.max:
            return f"{where}{self.stat} = {value} above {self.max}"
        return None


@dataclass(frozen=True)
class Comparison:
    """Ratio bounds of one statistic between two runs of an entry ("" is the base run)."""

    stat: str
    numerator: str
    denominator: str = ""
    min: Optional[float] = None
    max: Optional[float] = None

    def check(self, summaries: Mapping[str, Mapping[str, Any]]) -> Optional[str]:
        num = lookup(summaries.get(self.numerator, {}), self.stat)
        den = lookup(summaries.get(self.denominator, {}), self.stat)
        label = f"{self.numerator or 'base'}/{self.denominator or 'base'} {self.stat}"
        if num is _MISSING or den is _MISSING or num is None or den is None:
            return f"{label}: statistic not available"
        if den == 0:
            return f"{label}: denominator is zero"
        ratio = num / den
        if self.min is not None and ratio < self.min:
            return f"{label} = {ratio:.4f} below {self.min}"
        if self.max is not None and ratio > self.max:
            return f"{label} = {ratio:.4f} above {self.max}"
        return None


@dataclass(frozen=True)
class ProductBound:
    """One statistic of a run bounded above by the product of others of the same run."""

    stat: str
    factors: Tuple[str, ...]

    def check(self, summary: Mapping[str, Any], label: str = "") -> Optional[str]:
        where = f"[{label}] " if label else ""
        value = lookup(summary, self.stat)
        parts = [lookup(summary, f) for f in self.factors]
        if any(v is _MISSING or v is None for v in (value, *parts)):
            return f"{where}{self.stat} or one of {', '.join(self.factors)} is not available"
        bound = reduce(lambda a, b: a * b, parts, 1.0)
        if value > bound:
            return f"{where}{self.stat} = {value} above {' x '.join(self.factors)} = {bound:.4f}"
        return None


@dataclass(frozen=True)
class BusyModel:
    """
    A variant's duty-cycle ratio against the base run, predicted from the
    base run's top-collector busy time per work kind with some kinds scaled.
    The measured ratio of `series.duty_top.mean` must fall within
    `tolerance` (relative) of the prediction.
    """

    variant: str
    scale: Mapping[str, float]
    tolerance: float = 0.05
    pool: str = "global"

    def predicted(self, base: Mapping[str, Any]) -> Optional[float]:
        busy = lookup(base, f"counters.pool_{self.pool}.top_busy_ms_by_kind")
        if not isinstance(busy, Mapping):
            return None
        total = sum(busy.values())
        if total <= 0:
            return None
        return sum(ms * self.scale.get(kind, 1.0) for kind, ms in busy.items()) / total

    def check(self, summaries: Mapping[str, Mapping[str, Any]]) -> Optional[str]:
        label = f"{self.variant}/base series.duty_top.mean"
        expected = self.predicted(summaries.get("", {}))
        num = lookup(summaries.get(self.variant, {}), "series.duty_top.mean")
        den = lookup(summaries.get("", {}), "series.duty_top.mean")
        missing = (_MISSING, None)
        if expected is None or any(v is m for v in (num, den) for m in missing) or not den:
            return f"{label}: statistic not available"
        ratio = num / den
        if abs(ratio - expected) > self.tolerance * expected:
            return (
                f"{label} = {ratio:.4f}, busy-time model predicts {expected:.4f} "
                f"(+/-{self.tolerance:.0%})"
            )
        return None


Check = Union[Expectation, ProductBound]
RunComparison = Union[Comparison, BusyModel]


@dataclass(frozen=True)
class ScenarioLibraryEntry:
    name: str
    description: str
    config: Doc
    expectations: Tuple[Check, ...] = ()
    variants: Dict[str, Doc] = field(default_factory=dict)
    variant_expectations: Dict[str, Tuple[Check, ...]] = field(default_factory=dict)
    comparisons: Tuple[RunComparison, ...] = ()
    sweep: Optional[Tuple[str, Tuple[float, ...]]] = None
    heavy: bool = False

    def scenario(self) -> ScenarioConfig:
        return config_from_dict(copy.deepcopy(self.config))

    def variant(self, name: str) -> ScenarioConfig:
        return config_from_dict(copy.deepcopy(self.variants[name]))


def lookup(doc: Mapping[str, Any], path: str) -> Any:
    """Dotted-path access into a nested mapping; a sentinel when absent."""

    def step(node: Any, key: str) -> Any:
        if isinstance(node, Mapping) and key in node:
            return node[key]
        return _MISSING

    return reduce(step, path.split("."), doc)


# ---------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------
def _schedds(
    count: int, memory_mb: int, name: str = "schedd", pools: Sequence[str] = ("global",)
) -> Doc:
    return {
        "name": name,
        "count": count,
        "memory_capacity_mb": memory_mb,
        "ram_per_running_job_mb": 1,
        "pools": list(pools),
    }


def _grid(
    pid: str, cores: int, startd_count: int = 1, slots: int = 1, slot_cores: int = 1, **kw: Any
) -> Doc:
    doc: Doc = {
        "id": pid,
        "kind": "GridSite",
        "pledged_cores": cores,
        "glidein": {
            "startd_count": startd_count,
            "slots_per_startd": slots,
            "slot_cores": slot_cores,
        },
    }
    doc.update(kw)
    return doc


def _backlog(
    targets: Sequence[str], depth: int, mean_duration_ms: int = 6 * HOUR, cores: int = 1
) -> Doc:
    return {
        "id": "production",
        "targets": list(targets),
        "arrival": {"mode": "backlog", "depth": depth},
        "shape": {
            "cores": {"kind": "constant", "value": cores},
            "memory_mb": {"kind": "constant", "value": 1000},
            "duration_ms": {"kind": "exponential", "mean": mean_duration_ms},
        },
    }


def _scenario(
    name: str,
    description: str,
    schedds: List[Doc],
    providers: List[Doc],
    streams: List[Doc],
    pools: Optional[List[Doc]] = None,
    horizon_ms: int = 12 * HOUR,
    metrics: Optional[Doc] = None,
) -> Doc:
    doc: Doc = {
        "name": name,
        "description": description,
        "horizon_ms": horizon_ms,
        "seed": 1,
        "schedds": schedds,
        "pools": pools or [{"id": "global"}],
        "providers": providers,
        "streams": streams,
    }
    if metrics:
        doc["metrics"] = metrics
    return doc


def _patched(doc: Doc, **pool_patch: Any) -> Doc:
    """Copy of `doc` with keys of its global pool replaced (nested dicts merged)."""
    out = copy.deepcopy(doc)
    pool = out["pools"][0]
    for key, value in pool_patch.items():
        if isinstance(value, dict) and isinstance(pool.get(key), dict):
            pool[key] = {**pool[key], **value}
        else:
            pool[key] = value
    return out


# ---------------------------------------------------------------------
# Entries
# ---------------------------------------------------------------------
def _schedd_bottleneck(scale: int) -> ScenarioLibraryEntry:
    cap = 10 * 50_000 // scale
    slots = 8 * cap // 5
    full = scale == 1
    doc = _scenario(
        "schedd-bottleneck" if full else f"schedd-bottleneck-1to{scale}",
        f"10 schedds of {50_000 // scale} MB at 1 MB per running job, slots oversupplied: "
        f"running jobs stop at {cap}.",
        [_schedds(10, 50_000 // scale)],
        [_grid("grid", slots, slots=32 if full else 8)],
        [_backlog(["schedd"], depth=cap // 10 // 2)],
        # collector kept far from saturation
        pools=[{"id": "global", "collector": {"cost_update_ms": 0.01 if full else 1.0}}],
    )
    return ScenarioLibraryEntry(
        name=doc["name"],
        description=doc["description"],
        config=doc,
        expectations=(
            Expectation("series.running_total.peak", cap, cap),
            Expectation("plateau.plateau_value", 0.98 * cap, cap),
        ),
        heavy=full,
    )


def _schedd_fleet_doubled() -> ScenarioLibraryEntry:
    doc = _scenario(
        "schedd-fleet-doubled-1to100",
        "20 schedds of 500 MB with the slot supply raised to 12000: the ceiling doubles to 10000.",
        [_schedds(20, 500)],
        [_grid("grid", 12_000, slots=8)],
        [_backlog(["schedd"], depth=250)],
    )
    return ScenarioLibraryEntry(
        name=doc["name"],
        description=doc["description"],
        config=doc,
        expectations=(
            Expectation("series.running_total.peak", 10_000, 10_000),
            Expectation("plateau.plateau_value", 9_800, 10_000),
        ),
    )


def _ccb_bottleneck(raised: bool) -> ScenarioLibraryEntry:
    cap = 20_000 if raised else 6_000
    slots = 12_000 if raised else 10_000
    plateau = 10_000 if raised else 6_000
    doc = _scenario(
        "ccb-bottleneck-raised" if raised else "ccb-bottleneck",
        f"{slots} single-slot startds behind a CCB capped at {cap} connections, schedd headroom "
        f"10000: running jobs plateau at {plateau}.",
        [_schedds(20, 500)],
        [_grid("grid", slots)],
        [_backlog(["schedd"], depth=250)],
        pools=[{"id": "global", "ccb": {"max_connections": cap, "retry_backoff_ms": 10 * MINUTE}}],
        horizon_ms=6 * HOUR,
    )
    expectations = [
        Expectation("series.running_total.peak", plateau, plateau),
        Expectation("plateau.plateau_value", 0.98 * plateau, plateau),
    ]
    if not raised:
        expectations.append(Expectation("series.ccb_reg.peak", cap, cap))
        expectations.append(Expectation("counters.pool_global.ccb_rejections", 1))
    return ScenarioLibraryEntry(
        name=doc["name"],
        description=doc["description"],
        config=doc,
        expectations=tuple(expectations),
    )


def _collector_saturation(scale: int) -> ScenarioLibraryEntry:
    target = 800_000 // scale
    full = scale == 1
    doc = _scenario(
        "collector-saturation" if full else f"collector-saturation-1to{scale}",
        f"Uncapped CCB, update cost calibrated so the collector saturates at {target} slots, "
        f"{2 * target} slots offered: duty cycle reaches 1 and running jobs level off "
        f"near {target}.",
        [_schedds(20, 2 * target // 20 + 1_000)],
        [
            _grid(
                "grid",
                2 * target,
                slots=4,
                # 24 slots a minute at desk scale
                pilot_submission_rate_limit=max(6, 6 * 100 // scale),
            )
        ],
        [_backlog(["schedd"], depth=max(500, target // 16))],
        pools=[
            {
                "id": "global",
                "update_filtering": True,
                "udp_transport": {"enabled": True, "buffer": max(500, 500 * 100 // scale)},
                "collector": {
                    "calibrate": {"target_slots": target, "mean_job_duration_ms": 6 * HOUR}
                },
            }
        ],
        horizon_ms=24 * HOUR if full else 12 * HOUR,
        metrics={"interval_ms": 5 * MINUTE, "plateau_tolerance": 0.05},
    )
    return ScenarioLibraryEntry(
        name=doc["name"],
        description=doc["description"],
        config=doc,
        expectations=(
            Expectation("series.duty_top.peak", 0.95),
            Expectation("counters.pool_global.udp_drops", 1),
            Expectation("counters.pool_global.stale_claims", 1),
            Expectation("plateau.plateau_value", 0.9 * target, 1.1 * target),
            Expectation("saturation_chain.ordered", 1, 1),
        ),
        sweep=(
            "/providers/0/pledged_cores",
            tuple(float(v) for v in (target // 4, target // 2, target, 2 * target)),
        ),
        heavy=full,
    )


def _ablation() -> ScenarioLibraryEntry:
    stream = {
        "id": "production",
        "targets": ["schedd"],
        "arrival": {"mode": "rate", "rate_per_s": 1.5, "process": "constant"},
        "stop_ms": 6 * HOUR,
        "shape": {
            "cores": {"kind": "constant", "value": 1},
            "memory_mb": {"kind": "constant", "value": 1000},
            "duration_ms": {"kind": "uniform", "low": 10 * MINUTE, "high": 30 * MINUTE},
        },
    }
    base = _scenario(
        "optimizations-ablation",
        "2000 slots well below saturation; every collector and negotiator optimization flipped "
        "on its own against the same workload.",
        [_schedds(4, 1_000)],
        [_grid("grid", 2_000, slots=4)],
        [stream],
        pools=[{"id": "global", "collector": {"cost_update_ms": 20.0}}],
        horizon_ms=8 * HOUR,
    )
    variants = {
        "filtering": _patched(base, update_filtering=True),
        "secondaries": _patched(base, secondary_collectors={"count": 4, "batch_factor": 10}),
        "threads": _patched(base, negotiator={"threads": 4}),
        "priority-routing": _patched(
            base, secondary_collectors={"count": 4, "batch_factor": 10}, priority_query_routing=True
        ),
        "separate-ccb": _patched(base, ccb={"separate_ccb_host": True}),
        "udp": _patched(base, udp_transport={"enabled": True, "buffer": 1_000_000}),
    }
    return ScenarioLibraryEntry(
        name=base["name"],
        description=base["description"],
        config=base,
        expectations=(
            Expectation("transition_updates_per_completed_job", 2.0, 2.0),
            Expectation("counters.jobs_completed", 32_400, 32_400),
        ),
        variants=variants,
        variant_expectations={
            "filtering": (Expectation("transition_updates_per_completed_job", 1.0, 1.0),),
            "priority-routing": (
                Expectation("counters.pool_global.top_busy_ms_by_kind.query_lo", 0.0, 0.0),
            ),
            "udp": (Expectation("counters.pool_global.udp_drops", 0, 0),),
        },
        comparisons=(
            BusyModel("filtering", {"update": 0.5}),
            Comparison("series.duty_top.mean", "secondaries", max=0.5),
            Comparison("counters.jobs_completed", "threads", min=1.0, max=1.0),
            Comparison("counters.jobs_completed", "separate-ccb", min=1.0, max=1.0),
        ),
    )


def _nersc_burst() -> ScenarioLibraryEntry:
    doc = _scenario(
        "nersc-burst",
        "A 4000-core grid baseline plus three 1000-core HPC allocations of 2 to 4 hours; "
        "8-core jobs keep both busy.",
        [_schedds(4, 50_000)],
        [
            _grid("grid", 4_000, slot_cores=8),
            {
                "id": "nersc",
                "kind": "HpcFacility",
                "integration": "SiteExtension",
                "burst_schedule": [
                    {"start_ms": 2 * HOUR, "duration_ms": 3 * HOUR, "cores": 1_000},
                    {"start_ms": 7 * HOUR, "duration_ms": 2 * HOUR, "cores": 1_000},
                    {"start_ms": 11 * HOUR, "duration_ms": 4 * HOUR, "cores": 1_000},
                ],
                "glidein": {"startd_count": 1, "slots_per_startd": 1, "slot_cores": 8},
            },
        ],
        [_backlog(["schedd"], depth=200, mean_duration_ms=2 * HOUR, cores=8)],
        horizon_ms=16 * HOUR,
    )
    return ScenarioLibraryEntry(
        name=doc["name"],
        description=doc["description"],
        config=doc,
        expectations=(
            Expectation("series.cores_total.peak", 4_900, 5_000),
            Expectation("series.cores_nersc.peak", 980, 1_000),
            Expectation("series.cores_grid.peak", 3_920, 4_000),
            ProductBound(
                "providers.nersc.time_average_cores_in_use",
                ("providers.nersc.window_duty_fraction", "providers.nersc.peak_cores_in_use"),
            ),
        ),
    )


def _federated_hpc() -> ScenarioLibraryEntry:
    hpc: Doc = {
        "id": "hpc",
        "kind": "HpcFacility",
        "integration": "FederatedSubpool",
        "pool": "hpc",
        "burst_schedule": [{"start_ms": HOUR, "duration_ms": 4 * HOUR, "cores": 1_000}],
        "glidein": {"startd_count": 1, "slots_per_startd": 4, "slot_cores": 1},
    }
    base = _scenario(
        "federated-hpc",
        "An HPC allocation joining as a federated subpool fed by flocking, compared with the "
        "same allocation joining the global pool as a site extension.",
        [_schedds(4, 50_000, pools=("global", "hpc"))],
        [_grid("grid", 2_000, slots=4), hpc],
        [_backlog(["schedd"], depth=1_000, mean_duration_ms=2 * HOUR)],
        pools=[{"id": "global"}, {"id": "hpc", "role": "Subpool"}],
        horizon_ms=8 * HOUR,
    )
    site = copy.deepcopy(base)
    site["providers"][1].update(integration="SiteExtension", pool="global")
    return ScenarioLibraryEntry(
        name=base["name"],
        description=base["description"],
        config=base,
        expectations=(
            Expectation("counters.flocked_jobs", 1),
            Expectation("series.cores_hpc.peak", 950, 1_000),
        ),
        variants={"site-extension": site},
        variant_expectations={"site-extension": (Expectation("counters.flocked_jobs", 0, 0),)},
        comparisons=(
            Comparison("series.cores_total.peak", "", "site-extension", min=0.95, max=1.05),
        ),
    )


LIBRARY: Dict[str, ScenarioLibraryEntry] = {
    e.name: e
    for e in (
        _schedd_bottleneck(1),
        _schedd_bottleneck(100),
        _schedd_fleet_doubled(),
        _ccb_bottleneck(raised=False),
        _ccb_bottleneck(raised=True),
        _collector_saturation(1),
        _collector_saturation(100),
        _ablation(),
        _nersc_burst(),
        _federated_hpc(),
    )
}


def get_entry(name: str) -> ScenarioLibraryEntry:
    try:
        return LIBRARY[name]
    except KeyError:
        raise ConfigError(
            f"unknown library scenario '{name}' (known: {', '.join(sorted(LIBRARY))})"
        ) from None


__all__ = [
    "BusyModel",
    "Check",
    "Comparison",
    "Expectation",
    "LIBRARY",
    "ProductBound",
    "RunComparison",
    "ScenarioLibraryEntry",
    "get_entry",
    "lookup",
]
