# src/simpool/cli/__init__.py
"""
simpool command line.

    simpool run <config.json> --out <dir> [--seed N] [--until MS]
    simpool validate <config.json>
    simpool scenario <library-name> --out <dir> [--sweep]
    simpool sweep <config.json> --param <pointer> --values a,b,c --out <dir>
    simpool plot <metrics.csv>
    simpool scenarios

Exit codes: 0 ok, 1 invalid configuration, 2 I/O error, 3 failed expectation.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import typer

from simpool.config import Settings, load_config
from simpool.errors import (
    AssertionFailure,
    ConfigError,
    InvalidParameter,
    InvariantViolation,
    SimpoolError,
    SimpoolIOError,
)
from simpool.lib.plotting import plot_series
from simpool.scenarios.library import LIBRARY, get_entry
from simpool.scenarios.runner import run_library_entry, run_scenario, sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_ASSERTION = 3

app = typer.Typer(
    add_completion=False,
    no_args_is_help=True,
    help="Discrete-event simulator of a pilot-based batch pool.",
)


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map simpool errors to the documented exit codes."""
    try:
        yield
    except (ConfigError, InvalidParameter) as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_VALIDATION)
    except (SimpoolIOError, OSError) as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_IO)
    except (AssertionFailure, InvariantViolation) as e:
        typer.echo(f"failed: {e}", err=True)
        raise typer.Exit(EXIT_ASSERTION)
    except SimpoolError as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_VALIDATION)


def _settings(ctx: typer.Context) -> Settings:
    return ctx.obj if isinstance(ctx.obj, Settings) else Settings()


def _parse_values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise InvalidParameter(f"--values must be comma-separated numbers: {e}") from e


@app.callback()
def main(
    ctx: typer.Context,
    log_level: Optional[str] = typer.Option(
        None, "--log-level", help="DEBUG, INFO, WARNING, ... (default: SIMPOOL_LOG_LEVEL or INFO)"
    ),
) -> None:
    try:
        settings = Settings.from_env()
    except RuntimeError as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_VALIDATION)
    if log_level:
        settings = settings.model_copy(update={"log_level": log_level.upper()})
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="[%(asctime)s] %(levelname)s: %(message)s",
    )
    ctx.obj = settings


@app.command()
def run(
    ctx: typer.Context,
    config: Path = typer.Argument(..., help="Scenario JSON"),
    out: Optional[Path] = typer.Option(
        None, "--out", "-o", help="Output directory (default: <outdir>/<name>)"
    ),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, help="Override the scenario seed"),
    until: Optional[int] = typer.Option(None, "--until", min=0, help="Override the horizon (ms)"),
) -> None:
    """Run a scenario file and write metrics.csv, summary.json and resolved-config.json."""
    with _exit_codes():
        cfg = load_config(config)
        dest = out or _settings(ctx).outdir / cfg.name
        result = run_scenario(cfg, dest, seed=seed, until=until)
        typer.echo(str(result.out_dir))


@app.command()
def validate(config: Path = typer.Argument(..., help="Scenario JSON")) -> None:
    """Check a scenario file without running it."""
    with _exit_codes():
        cfg = load_config(config)
        typer.echo(
            f"ok: {cfg.name} ({len(cfg.schedds)} schedd group(s), {len(cfg.pools)} pool(s), "
            f"{len(cfg.providers)} provider(s), {len(cfg.streams)} stream(s))"
        )


@app.command()
def scenario(
    ctx: typer.Context,
    name: str = typer.Argument(..., help="Library scenario name (see `simpool scenarios`)"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0),
    run_sweep: bool = typer.Option(
        False, "--sweep", help="Run the entry's parameter sweep instead"
    ),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Sweep processes"),
) -> None:
    """Run a canned scenario and check its expectations."""
    with _exit_codes():
        entry = get_entry(name)
        settings = _settings(ctx)
        dest = out or settings.outdir / entry.name
        if run_sweep:
            if entry.sweep is None:
                raise InvalidParameter(f"scenario '{entry.name}' has no sweep")
            param, values = entry.sweep
            sweep(entry.scenario(), param, values, dest, workers=workers or settings.workers)
        else:
            run_library_entry(entry, dest, seed=seed)
        typer.echo(str(dest))


@app.command("sweep")
def sweep_cmd(
    ctx: typer.Context,
    config: Path = typer.Argument(..., help="Scenario JSON"),
    param: str = typer.Option(
        ..., "--param", help="JSON pointer of a numeric field, e.g. /pools/0/negotiator/threads"
    ),
    values: str = typer.Option(..., "--values", help="Comma-separated values"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Parallel runs"),
) -> None:
    """One run per value of a numeric parameter, plus sweep-summary.csv."""
    with _exit_codes():
        cfg = load_config(config)
        settings = _settings(ctx)
        dest = out or settings.outdir / f"{cfg.name}-sweep"
        sweep(cfg, param, _parse_values(values), dest, workers=workers or settings.workers)
        typer.echo(str(dest / "sweep-summary.csv"))


@app.command()
def plot(
    metrics_csv: Path = typer.Argument(..., help="metrics.csv of a run"),
    html: bool = typer.Option(
        True, "--html/--no-html", help="Also write an interactive plotly page"
    ),
) -> None:
    """Write <csv>.gp (gnuplot) and <csv>.html (plotly) next to a metrics.csv."""
    with _exit_codes():
        for p in plot_series(metrics_csv, html=html):
            typer.echo(str(p))


@app.command("scenarios")
def list_scenarios() -> None:
    """List the scenario library."""
    for name, entry in LIBRARY.items():
        flag = " (heavy)" if entry.heavy else ""
        typer.echo(f"{name}{flag}: {entry.description}")


__all__ = ["EXIT_ASSERTION", "EXIT_IO", "EXIT_OK", "EXIT_VALIDATION", "app", "main"]
