# src/simpool/config.py
"""
Scenario configuration and process settings.

A scenario is a strict pydantic model tree: unknown keys are rejected so a
typo in a toggle name is a validation error instead of a silently ignored
knob. ``parse_config`` turns JSON text into a validated ``ScenarioConfig``
and reports the first problem with a JSON-pointer path.
"""
from __future__ import annotations

import json
import os
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_core import PydanticCustomError

from simpool.errors import ConfigParseError, ConfigValidationError
from simpool.lib.kernel import HOUR, MINUTE, SECOND
from simpool.lib.pool import DEFAULT_GRACE_MS, GLOBAL_POOL, PoolRole


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


def _reference_error(path: str, reason: str) -> PydanticCustomError:
    return PydanticCustomError("reference", "{reason}", {"path": path, "reason": reason})


# ---------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------
class ConstantDist(StrictModel):
    kind: Literal["constant"] = "constant"
    value: float = Field(..., ge=0, description="Point mass")


class ExponentialDist(StrictModel):
    kind: Literal["exponential"] = "exponential"
    mean: float = Field(..., gt=0)


class UniformDist(StrictModel):
    kind: Literal["uniform"] = "uniform"
    low: float = Field(..., ge=0)
    high: float = Field(..., ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "UniformDist":
        if self.high < self.low:
            raise ValueError(f"high ({self.high}) must be >= low ({self.low})")
        return self


class LogNormalDist(StrictModel):
    kind: Literal["lognormal"] = "lognormal"
    mean: float = Field(..., gt=0, description="Arithmetic mean of the distribution")
    sigma: float = Field(..., ge=0, description="Standard deviation of the underlying normal")


class ChoiceDist(StrictModel):
    kind: Literal["choice"] = "choice"
    values: List[float] = Field(..., min_length=1)
    weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def _weights(self) -> "ChoiceDist":
        if self.weights is not None:
            if len(self.weights) != len(self.values):
                raise ValueError("weights and values must have the same length")
            if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
                raise ValueError("weights must be non-negative with a positive sum")
        return self


Distribution = Annotated[
    Union[ConstantDist, ExponentialDist, UniformDist, LogNormalDist, ChoiceDist],
    Field(discriminator="kind"),
]


# ---------------------------------------------------------------------
# Schedds
# ---------------------------------------------------------------------
class ScheddConfig(StrictModel):
    name: str = Field(..., min_length=1)
    count: int = Field(
        1, ge=1, description="Replicate into a fleet named <name>-00, <name>-01, ..."
    )
    memory_capacity_mb: int = Field(50_000, ge=0)
    ram_per_running_job_mb: int = Field(1, gt=0, description="Schedd RAM per running job")
    max_idle_jobs: Optional[int] = Field(None, ge=0, description="Idle queue cap; None = unbounded")
    pools: List[str] = Field(default_factory=lambda: [GLOBAL_POOL], min_length=1)

    def instance_names(self) -> List[str]:
        if self.count == 1:
            return [self.name]
        width = max(2, len(str(self.count - 1)))
        return [f"{self.name}-{i:0{width}d}" for i in range(self.count)]


# ---------------------------------------------------------------------
# Pools and central-manager daemons
# ---------------------------------------------------------------------
class CalibrationConfig(StrictModel):
    target_slots: int = Field(..., gt=0)
    mean_job_duration_ms: int = Field(6 * HOUR, gt=0)


class CollectorConfig(StrictModel):
    cost_update_ms: float = Field(1.0, ge=0, description="Service time per slot update")
    calibrate: Optional[CalibrationConfig] = Field(
        None, description="Derive cost_update_ms so offered load is 1.0 at target_slots"
    )
    cost_query_hi_ms: float = Field(50.0, ge=0)
    cost_query_lo_ms: float = Field(200.0, ge=0)
    registration_timeout_ms: int = Field(30 * SECOND, gt=0)
    registration_backoff_ms: int = Field(MINUTE, gt=0)
    retention_ms: int = Field(HOUR, gt=0, description="Busy history kept for duty-cycle windows")


class SecondaryCollectorsConfig(StrictModel):
    count: int = Field(0, ge=0)
    batch_factor: int = Field(10, ge=1)
    max_delay_ms: int = Field(5 * SECOND, gt=0, description="Digest flush timeout")


class NegotiatorConfig(StrictModel):
    count: int = Field(1, ge=1)
    threads: int = Field(1, ge=1)
    match_cost_per_candidate_ms: float = Field(1.0, ge=0)
    cycle_delay_ms: int = Field(MINUTE, ge=0)


class CcbConfig(StrictModel):
    max_connections: Optional[int] = Field(None, ge=0, description="None = uncapped")
    separate_ccb_host: bool = False
    dedicated_max_connections: Optional[int] = Field(None, ge=0)
    retry_backoff_ms: int = Field(MINUTE, gt=0)

    @property
    def effective_cap(self) -> Optional[int]:
        return self.dedicated_max_connections if self.separate_ccb_host else self.max_connections


class UdpConfig(StrictModel):
    enabled: bool = False
    buffer: int = Field(10_000, ge=0, description="UDP messages the collector can hold")


class FederationLinkConfig(StrictModel):
    flock_threshold_ms: int = Field(5 * MINUTE, ge=0)


class PoolConfig(StrictModel):
    id: str = GLOBAL_POOL
    role: PoolRole = PoolRole.GLOBAL
    collector: CollectorConfig = Field(default_factory=CollectorConfig)
    secondary_collectors: SecondaryCollectorsConfig = Field(
        default_factory=SecondaryCollectorsConfig
    )
    negotiator: NegotiatorConfig = Field(default_factory=NegotiatorConfig)
    ccb: CcbConfig = Field(default_factory=CcbConfig)
    update_filtering: bool = False
    udp_transport: UdpConfig = Field(default_factory=UdpConfig)
    priority_query_routing: bool = False
    heartbeat_interval_ms: int = Field(5 * MINUTE, gt=0)
    monitor_query_interval_ms: int = Field(MINUTE, gt=0)
    monitor_queries: int = Field(1, ge=0)
    token_auth: bool = Field(False, description="Recorded only; authentication is free")
    federation: Optional[FederationLinkConfig] = None

    @model_validator(mode="after")
    def _role(self) -> "PoolConfig":
        if self.role is PoolRole.SUBPOOL and self.federation is None:
            self.federation = FederationLinkConfig()
        return self


# ---------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------
class ProviderKind(str, Enum):
    GRID = "GridSite"
    HPC = "HpcFacility"


class Integration(str, Enum):
    SITE_EXTENSION = "SiteExtension"
    FEDERATED_SUBPOOL = "FederatedSubpool"


class GlideinTemplate(StrictModel):
    startd_count: int = Field(1, ge=1)
    slots_per_startd: int = Field(1, ge=1)
    slot_cores: int = Field(1, ge=1)
    slot_memory_mb: int = Field(2_000, ge=0)
    lifetime_ms: int = Field(48 * HOUR, gt=0)
    grace_ms: int = Field(DEFAULT_GRACE_MS, ge=0)

    @property
    def cores(self) -> int:
        return self.startd_count * self.slots_per_startd * self.slot_cores


class BurstWindowConfig(StrictModel):
    start_ms: int = Field(..., ge=0)
    duration_ms: int = Field(..., gt=0)
    cores: int = Field(..., gt=0)


class RandomBurstsConfig(StrictModel):
    count: int = Field(..., ge=1)
    first_start_ms: int = Field(0, ge=0)
    mean_gap_ms: int = Field(..., gt=0, description="Exponential gap between windows")
    mean_cores: float = Field(..., gt=0)
    sigma: float = Field(0.5, ge=0)
    min_duration_ms: int = Field(2 * HOUR, gt=0)
    max_duration_ms: int = Field(4 * HOUR, gt=0)


class ProviderConfig(StrictModel):
    id: str = Field(..., min_length=1)
    kind: ProviderKind = ProviderKind.GRID
    pool: str = GLOBAL_POOL
    pledged_cores: int = Field(0, ge=0)
    burst_schedule: List[BurstWindowConfig] = Field(default_factory=list)
    burst_schedule_csv: Optional[Path] = None
    random_bursts: Optional[RandomBurstsConfig] = None
    integration: Integration = Integration.SITE_EXTENSION
    glidein: GlideinTemplate = Field(default_factory=GlideinTemplate)
    pilot_submission_rate_limit: int = Field(600, ge=1, description="Glideins per minute")
    tick_interval_ms: int = Field(MINUTE, gt=0)
    allocation_grace_ms: int = Field(0, ge=0)
    start_delay: Optional[Distribution] = Field(None, description="HPC batch-queue wait, ms")

    @model_validator(mode="after")
    def _shape(self) -> "ProviderConfig":
        if self.kind is ProviderKind.GRID:
            if self.burst_schedule or self.burst_schedule_csv or self.random_bursts:
                raise ValueError("a GridSite provider has no burst schedule")
        elif self.pledged_cores:
            raise ValueError("an HpcFacility pledges capacity only through burst windows")
        windows = sorted(self.burst_schedule, key=lambda w: w.start_ms)
        for a, b in zip(windows, windows[1:]):
            if a.start_ms + a.duration_ms > b.start_ms:
                raise ValueError(f"burst windows overlap at start_ms={b.start_ms}")
        return self


# ---------------------------------------------------------------------
# Workload
# ---------------------------------------------------------------------
class JobLabel(str, Enum):
    PRODUCTION = "Production"
    ANALYSIS = "Analysis"
    TIER0 = "Tier0"


class BacklogArrival(StrictModel):
    mode: Literal["backlog"] = "backlog"
    depth: int = Field(..., ge=0, description="Idle jobs kept queued per target schedd")


class RateArrival(StrictModel):
    mode: Literal["rate"] = "rate"
    rate_per_s: float = Field(..., gt=0)
    process: Literal["constant", "poisson"] = "constant"


Arrival = Annotated[Union[BacklogArrival, RateArrival], Field(discriminator="mode")]


class JobShapeConfig(StrictModel):
    cores: Distribution = Field(default_factory=lambda: ConstantDist(value=1))
    memory_mb: Distribution = Field(default_factory=lambda: ConstantDist(value=1_000))
    duration_ms: Distribution = Field(default_factory=lambda: ExponentialDist(mean=6 * HOUR))


class StreamConfig(StrictModel):
    id: str = Field(..., min_length=1)
    targets: List[str] = Field(..., min_length=1, description="Schedd names or fleet base names")
    arrival: Arrival
    shape: JobShapeConfig = Field(default_factory=JobShapeConfig)
    label: JobLabel = JobLabel.PRODUCTION
    start_ms: int = Field(0, ge=0)
    stop_ms: Optional[int] = Field(None, ge=0)


# ---------------------------------------------------------------------
# Metrics and scenario
# ---------------------------------------------------------------------
class MetricsConfig(StrictModel):
    interval_ms: int = Field(MINUTE, gt=0)
    duty_window_ms: Optional[int] = Field(None, gt=0, description="Defaults to interval_ms")
    plateau_series: str = "running_total"
    plateau_window: int = Field(10, ge=2)
    plateau_tolerance: float = Field(0.01, gt=0)

    @property
    def duty_window(self) -> int:
        return self.duty_window_ms or self.interval_ms


class ScenarioConfig(StrictModel):
    name: str = "scenario"
    description: str = ""
    horizon_ms: int = Field(12 * HOUR, ge=0)
    seed: int = Field(0, ge=0)
    schedds: List[ScheddConfig] = Field(..., min_length=1)
    pools: List[PoolConfig] = Field(default_factory=lambda: [PoolConfig()], min_length=1)
    providers: List[ProviderConfig] = Field(default_factory=list)
    streams: List[StreamConfig] = Field(..., min_length=1)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    check_invariants: bool = False

    @model_validator(mode="after")
    def _references(self) -> "ScenarioConfig":
        pool_roles: Dict[str, PoolRole] = {}
        for i, p in enumerate(self.pools):
            if p.id in pool_roles:
                raise _reference_error(f"/pools/{i}/id", f"duplicate pool id '{p.id}'")
            pool_roles[p.id] = p.role
        globals_ = [p.id for p in self.pools if p.role is PoolRole.GLOBAL]
        if globals_ != [GLOBAL_POOL]:
            raise _reference_error("/pools", f"exactly one Global pool with id '{GLOBAL_POOL}'")

        names: set[str] = set()
        bases: set[str] = set()
        for i, s in enumerate(self.schedds):
            for n in s.instance_names():
                if n in names:
                    raise _reference_error(f"/schedds/{i}/name", f"duplicate schedd name '{n}'")
                names.add(n)
            bases.add(s.name)
            for j, pid in enumerate(s.pools):
                if pid not in pool_roles:
                    raise _reference_error(f"/schedds/{i}/pools/{j}", f"unknown pool '{pid}'")

        ids: set[str] = set()
        for i, pr in enumerate(self.providers):
            if pr.id in ids:
                raise _reference_error(f"/providers/{i}/id", f"duplicate provider id '{pr.id}'")
            ids.add(pr.id)
            role = pool_roles.get(pr.pool)
            if role is None:
                raise _reference_error(f"/providers/{i}/pool", f"unknown pool '{pr.pool}'")
            if pr.kind is ProviderKind.HPC:
                want = (
                    PoolRole.SUBPOOL
                    if pr.integration is Integration.FEDERATED_SUBPOOL
                    else PoolRole.GLOBAL
                )
                if role is not want:
                    raise _reference_error(
                        f"/providers/{i}/pool",
                        f"{pr.integration.value} needs a {want.value} pool, "
                        f"'{pr.pool}' is {role.value}",
                    )

        for i, st in enumerate(self.streams):
            for j, t in enumerate(st.targets):
                if t not in names and t not in bases:
                    raise _reference_error(f"/streams/{i}/targets/{j}", f"unknown schedd '{t}'")
            if st.stop_ms is not None and st.stop_ms < st.start_ms:
                raise _reference_error(f"/streams/{i}/stop_ms", "stop_ms precedes start_ms")
        return self

    def pool(self, pool_id: str) -> PoolConfig:
        for p in self.pools:
            if p.id == pool_id:
                return p
        raise KeyError(pool_id)

    def resolve_targets(self, targets: List[str]) -> List[str]:
        """Expand fleet base names into instance names, keeping order."""
        out: List[str] = []
        for t in targets:
            for s in self.schedds:
                inst = s.instance_names()
                if t == s.name:
                    out.extend(inst)
                    break
                if t in inst:
                    out.append(t)
                    break
        return out


# ---------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------
def _pointer(loc: tuple[Any, ...]) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in loc) if loc else ""


def validation_error(exc: ValidationError) -> ConfigValidationError:
    """First pydantic error as a ConfigValidationError with a JSON-pointer path."""
    err = exc.errors()[0]
    ctx = err.get("ctx") or {}
    if err["type"] == "reference":
        return ConfigValidationError(str(ctx["path"]), str(ctx["reason"]))
    return ConfigValidationError(_pointer(tuple(err["loc"])), err["msg"])


def parse_config(text: str) -> ScenarioConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigValidationError("", "a scenario document must be a JSON object")
    return config_from_dict(doc)


def config_from_dict(doc: Dict[str, Any]) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(doc)
    except ValidationError as e:
        raise validation_error(e) from e


def load_config(path: Path) -> ScenarioConfig:
    from simpool.errors import SimpoolIOError

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise SimpoolIOError(f"cannot read {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise ConfigParseError(f"{path} is not UTF-8: {e}") from e
    return parse_config(text)


def set_pointer(doc: Dict[str, Any], pointer: str, value: Any) -> None:
    """Replace the numeric field addressed by a JSON pointer, in place."""
    parts = [p.replace("~1", "/").replace("~0", "~") for p in pointer.strip("/").split("/")]
    if not parts or parts == [""]:
        raise ConfigValidationError(pointer, "empty parameter path")
    node: Any = doc
    for part in parts[:-1]:
        node = _step(node, part, pointer)
    last = parts[-1]
    current = _step(node, last, pointer)
    if isinstance(current, bool) or not isinstance(current, (int, float)):
        found = type(current).__name__
        raise ConfigValidationError(pointer, f"not a numeric field (found {found})")
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _step(node: Any, part: str, pointer: str) -> Any:
    try:
        if isinstance(node, list):
            return node[int(part)]
        if isinstance(node, dict):
            return node[part]
    except (KeyError, IndexError, ValueError):
        pass
    raise ConfigValidationError(pointer, f"path segment '{part}' does not resolve")


# ---------------------------------------------------------------------
# Process settings
# ---------------------------------------------------------------------
class Settings(BaseModel):
    log_level: str = Field("INFO", description="Root log level")
    outdir: Path = Field(Path("runs"), description="Default output directory")
    workers: int = Field(1, ge=1, description="Processes used by sweeps")

    @classmethod
    def from_env(cls) -> "Settings":
        """
        Construct Settings from environment variables:
          - SIMPOOL_LOG_LEVEL (optional; defaults to INFO)
          - SIMPOOL_OUTDIR (optional; defaults to 'runs')
          - SIMPOOL_WORKERS (optional; defaults to 1)
        """
        level = os.environ.get("SIMPOOL_LOG_LEVEL", "INFO").strip().upper() or "INFO"
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise RuntimeError(
                f"SIMPOOL_LOG_LEVEL={level!r} is not a log level. Use e.g.\n"
                "  export SIMPOOL_LOG_LEVEL=DEBUG"
            )
        outdir = Path(os.environ.get("SIMPOOL_OUTDIR", "runs").strip() or "runs").expanduser()
        workers_env = os.environ.get("SIMPOOL_WORKERS", "1").strip() or "1"
        try:
            return cls(log_level=level, outdir=outdir, workers=int(workers_env))
        except (ValueError, ValidationError) as e:
            raise RuntimeError(f"Invalid Settings: {e}") from e

    def as_env(self) -> dict[str, str]:
        """Handy for subprocesses."""
        return {
            "SIMPOOL_LOG_LEVEL": self.log_level,
            "SIMPOOL_OUTDIR": str(self.outdir),
            "SIMPOOL_WORKERS": str(self.workers),
        }


__all__ = [
    "Arrival",
    "BacklogArrival",
    "BurstWindowConfig",
    "CalibrationConfig",
    "CcbConfig",
    "ChoiceDist",
    "CollectorConfig",
    "ConstantDist",
    "Distribution",
    "ExponentialDist",
    "FederationLinkConfig",
    "GlideinTemplate",
    "Integration",
    "JobLabel",
    "JobShapeConfig",
    "LogNormalDist",
    "MetricsConfig",
    "NegotiatorConfig",
    "PoolConfig",
    "ProviderConfig",
    "ProviderKind",
    "RandomBurstsConfig",
    "RateArrival",
    "ScenarioConfig",
    "ScheddConfig",
    "SecondaryCollectorsConfig",
    "Settings",
    "StreamConfig",
    "UdpConfig",
    "UniformDist",
    "config_from_dict",
    "load_config",
    "parse_config",
    "set_pointer",
    "validation_error",
]
