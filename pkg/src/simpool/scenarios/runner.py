# src/simpool/scenarios/runner.py
"""
Run scenarios to disk: one directory per run with metrics.csv, summary.json
and resolved-config.json, library expectations checked afterwards, and
parameter sweeps fanned out over worker processes.
"""
from __future__ import annotations

import copy
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from simpool.config import ScenarioConfig, config_from_dict, set_pointer
from simpool.errors import AssertionFailure, SimpoolError, SimpoolIOError
from simpool.lib.kernel import SimTime
from simpool.lib.metrics import write_series, write_summary
from simpool.scenarios.library import Check, ScenarioLibraryEntry, lookup
from simpool.simulation import Simulation, resolve_config

logger = logging.getLogger(__name__)

Number = Union[int, float]

SWEEP_COLUMNS = [
    "value",
    "run_dir",
    "plateau_running",
    "peak_running",
    "peak_duty_top",
    "mean_duty_top",
    "udp_drops",
    "stale_claims",
    "registration_refusals",
    "peak_nego_ms",
    "error",
]


@dataclass
class RunResult:
    out_dir: Path
    config: ScenarioConfig
    summary: Dict[str, Any]
    violations: List[str] = field(default_factory=list)

    @property
    def metrics_csv(self) -> Path:
        return self.out_dir / "metrics.csv"


def _prepare(out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        marker = out_dir / ".write-test"
        marker.write_text("", encoding="utf-8")
        marker.unlink()
    except OSError as e:
        raise SimpoolIOError(f"output directory {out_dir} is not writable: {e}") from e
    return out_dir


def check_expectations(
    summary: Dict[str, Any], expectations: Sequence[Check], label: str = ""
) -> List[str]:
    found = [e.check(summary, label) for e in expectations]
    return [v for v in found if v is not None]


def execute(
    cfg: ScenarioConfig,
    out_dir: Path,
    *,
    seed: Optional[int] = None,
    until: Optional[SimTime] = None,
    expectations: Sequence[Check] = (),
    label: str = "",
) -> RunResult:
    """Run one configuration into `out_dir`; expectation failures are returned, not raised."""
    out_dir = _prepare(out_dir)
    resolved = resolve_config(cfg, seed=seed, horizon=until)
    sim = Simulation(resolved)
    frames = sim.run()
    write_series(frames, out_dir / "metrics.csv", sim.layout)
    summary = sim.summary()
    write_summary(summary, out_dir / "summary.json")
    try:
        (out_dir / "resolved-config.json").write_text(
            resolved.model_dump_json(indent=2) + "\n", encoding="utf-8"
        )
    except OSError as e:
        raise SimpoolIOError(f"cannot write {out_dir / 'resolved-config.json'}: {e}") from e
    violations = check_expectations(summary, expectations, label)
    for v in violations:
        logger.warning("expectation failed: %s", v)
    logger.info("wrote %s (%d frames)", out_dir, len(frames))
    return RunResult(out_dir, resolved, summary, violations)


def run_scenario(
    cfg: ScenarioConfig,
    out_dir: Path,
    *,
    seed: Optional[int] = None,
    until: Optional[SimTime] = None,
    expectations: Sequence[Check] = (),
) -> RunResult:
    """Run and write one scenario; raises AssertionFailure when an expectation fails."""
    result = execute(cfg, out_dir, seed=seed, until=until, expectations=expectations)
    if result.violations:
        raise AssertionFailure(result.violations)
    return result


def run_library_entry(
    entry: ScenarioLibraryEntry, out_dir: Path, *, seed: Optional[int] = None
) -> Dict[str, RunResult]:
    """
    Run an entry and its variants. The base run goes to `out_dir` itself
    (or `out_dir/base` when the entry has variants), each variant to its
    own sub-directory. All expectations and comparisons are checked before
    AssertionFailure is raised.
    """
    out_dir = Path(out_dir)
    logger.info("scenario %s: %s", entry.name, entry.description)
    results: Dict[str, RunResult] = {}
    base_dir = out_dir / "base" if entry.variants else out_dir
    results[""] = execute(entry.scenario(), base_dir, seed=seed, expectations=entry.expectations)
    for name in entry.variants:
        results[name] = execute(
            entry.variant(name),
            out_dir / name,
            seed=seed,
            expectations=entry.variant_expectations.get(name, ()),
            label=name,
        )
    violations = [v for r in results.values() for v in r.violations]
    summaries = {name: r.summary for name, r in results.items()}
    for comp in entry.comparisons:
        problem = comp.check(summaries)
        if problem is not None:
            logger.warning("comparison failed: %s", problem)
            violations.append(problem)
    if violations:
        raise AssertionFailure(violations)
    return results


# ---------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------
def _coerce(value: Number) -> Number:
    return int(value) if isinstance(value, float) and value.is_integer() else value


def sweep_dir_name(parameter: str, value: Number) -> str:
    leaf = parameter.rstrip("/").rsplit("/", 1)[-1] or "value"
    return re.sub(r"[^A-Za-z0-9_.=-]", "_", f"{leaf}={_coerce(value)}")


def sweep_row(value: Number, run_dir: Path, summary: Dict[str, Any]) -> Dict[str, Any]:
    main = summary["counters"].get("pool_global", {})
    duty = summary["series"].get("duty_top", {})
    return {
        "value": value,
        "run_dir": str(run_dir),
        "plateau_running": summary["plateau"]["plateau_value"],
        "peak_running": lookup(summary, "series.running_total.peak"),
        "peak_duty_top": duty.get("peak"),
        "mean_duty_top": duty.get("mean"),
        "udp_drops": main.get("udp_drops"),
        "stale_claims": main.get("stale_claims"),
        "registration_refusals": main.get("registration_refusals"),
        "peak_nego_ms": lookup(summary, "series.nego_ms.peak"),
        "error": "",
    }


def _sweep_point(doc: Dict[str, Any], run_dir: str, value: Number) -> Dict[str, Any]:
    # top level so worker processes can unpickle it
    result = execute(config_from_dict(doc), Path(run_dir))
    return sweep_row(value, result.out_dir, result.summary)


def sweep(
    cfg: ScenarioConfig,
    parameter: str,
    values: Sequence[Number],
    out_dir: Path,
    *,
    workers: int = 1,
) -> pd.DataFrame:
    """
    One independent run per value of the numeric field at JSON pointer
    `parameter`, written to `<out_dir>/<field>=<value>/`, plus a combined
    `sweep-summary.csv`. Every point is validated before the first runs.
    """
    out_dir = _prepare(out_dir)
    base = cfg.model_dump(mode="json")
    points = []
    for v in values:
        doc = copy.deepcopy(base)
        set_pointer(doc, parameter, _coerce(v))
        config_from_dict(doc)
        points.append((doc, str(out_dir / sweep_dir_name(parameter, v)), _coerce(v)))
    logger.info("sweeping %s over %d values with %d worker(s)", parameter, len(points), workers)

    rows: List[Dict[str, Any]] = []
    if workers <= 1:
        for doc, run_dir, v in points:
            try:
                rows.append(_sweep_point(doc, run_dir, v))
            except SimpoolError as e:
                logger.warning("sweep point %s=%s failed: %s", parameter, v, e)
                rows.append({"value": v, "run_dir": run_dir, "error": str(e)})
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                (pool.submit(_sweep_point, doc, run_dir, v), run_dir, v)
                for doc, run_dir, v in points
            ]
            for fut, run_dir, v in futures:
                try:
                    rows.append(fut.result())
                except SimpoolError as e:
                    logger.warning("sweep point %s=%s failed: %s", parameter, v, e)
                    rows.append({"value": v, "run_dir": run_dir, "error": str(e)})

    df = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    dest = out_dir / "sweep-summary.csv"
    try:
        df.to_csv(dest, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise SimpoolIOError(f"cannot write {dest}: {e}") from e
    logger.info("wrote %s", dest)
    return df


__all__ = [
    "RunResult",
    "SWEEP_COLUMNS",
    "check_expectations",
    "execute",
    "run_library_entry",
    "run_scenario",
    "sweep",
    "sweep_dir_name",
    "sweep_row",
]
