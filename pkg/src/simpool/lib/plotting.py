# src/simpool/lib/plotting.py
"""
Figures for a metrics.csv: a plotly HTML page and a gnuplot script that
renders the same three panels (jobs, cores per provider, collector duty).
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from simpool.errors import SimpoolIOError
from simpool.lib.kernel import HOUR
from simpool.lib.metrics import SATURATED_DUTY, read_series
from simpool.theme import (
    ACCENT_GRAY,
    ACCENT_GREEN,
    BASE_FONT,
    DUTY_COLOR,
    GRID_COLOR,
    SATURATION_COLOR,
    get_provider_color,
)

logger = logging.getLogger(__name__)


def style_figure(fig: go.Figure, auto_height: bool = True) -> go.Figure:
    """
    Apply the simpool look to any Plotly figure: legible ticks, margins,
    consistent fonts and a horizontal legend under the plot.
    """
    if not fig or not getattr(fig, "layout", None):
        return fig

    fig.update_layout(
        template="plotly_white",
        font=BASE_FONT,
        title=dict(
            font=dict(size=17, color="#111827", family=BASE_FONT["family"]), x=0.5, xanchor="center"
        ),
        legend=dict(
            bgcolor="rgba(0,0,0,0)",
            orientation="h",
            yanchor="bottom",
            y=-0.18,
            xanchor="center",
            x=0.5,
            font=dict(size=12),
        ),
        margin=dict(l=70, r=50, t=60, b=90),
        plot_bgcolor="white",
        paper_bgcolor="white",
        hoverlabel=dict(font_size=12, font_family=BASE_FONT["family"]),
    )

    for ax in fig.layout:
        if ax.startswith("xaxis") or ax.startswith("yaxis"):
            axis = fig.layout[ax]
            axis.title.font.size = 13
            axis.tickfont.size = 11
            axis.automargin = True
            axis.showgrid = True
            axis.gridcolor = GRID_COLOR

    if auto_height:
        n_panels = sum(1 for k in fig.layout if k.startswith("yaxis"))
        fig.update_layout(height=max(550, 300 * n_panels))
    return fig


def metrics_figure(df: pd.DataFrame, title: str = "") -> go.Figure:
    hours = df["t_ms"] / HOUR
    fig = make_subplots(
        rows=3,
        cols=1,
        shared_xaxes=True,
        vertical_spacing=0.06,
        subplot_titles=("Jobs", "Cores in use", "Collector duty cycle"),
    )
    running = go.Scatter(
        x=hours, y=df["running_total"], name="running", line=dict(color=ACCENT_GREEN)
    )
    idle = go.Scatter(
        x=hours, y=df["idle_total"], name="idle", line=dict(color=ACCENT_GRAY, dash="dot")
    )
    fig.add_trace(running, row=1, col=1)
    fig.add_trace(idle, row=1, col=1)

    providers = [
        c[len("cores_"):] for c in df.columns if c.startswith("cores_") and c != "cores_total"
    ]
    for i, p in enumerate(providers):
        fig.add_trace(
            go.Scatter(
                x=hours,
                y=df[f"cores_{p}"],
                name=p,
                stackgroup="cores",
                line=dict(color=get_provider_color(p, i), width=1),
            ),
            row=2,
            col=1,
        )

    for c in (c for c in df.columns if c.startswith("duty_")):
        name = c[len("duty_"):]
        dash = None if name == "top" else "dash"
        line = dict(color=DUTY_COLOR, dash=dash)
        fig.add_trace(go.Scatter(x=hours, y=df[c], name=f"duty {name}", line=line), row=3, col=1)
    fig.add_hline(
        y=SATURATED_DUTY, line=dict(color=SATURATION_COLOR, dash="dot", width=1), row=3, col=1
    )

    fig.update_yaxes(range=[0, 1.05], row=3, col=1)
    fig.update_xaxes(title_text="time [h]", row=3, col=1)
    if title:
        fig.update_layout(title=title)
    return style_figure(fig)


def gnuplot_script(csv_path: Path, columns: List[str]) -> str:
    """gnuplot commands plotting the CSV by column name into <csv>.png."""
    csv = Path(csv_path).name
    providers = [c for c in columns if c.startswith("cores_") and c != "cores_total"]
    duties = [c for c in columns if c.startswith("duty_")]

    def series(cols: List[str], label_prefix: str = "") -> str:
        return ", \\\n     ".join(
            f"'{csv}' using ($1/{HOUR}):(column('{c}')) with lines title '{label_prefix}{c}'"
            for c in cols
        )

    lines = [
        "# gnuplot script generated by simpool",
        "set datafile separator ','",
        "set terminal pngcairo size 1200,1000",
        f"set output '{csv}.png'",
        "set grid",
        "set key outside right",
        "set multiplot layout 3,1",
        "set title 'Jobs'",
        "plot " + series(["running_total", "idle_total"]),
        "set title 'Cores in use'",
        "plot " + series(providers or ["cores_total"]),
        "set title 'Collector duty cycle'",
        "set yrange [0:1.05]",
        "set xlabel 'time [h]'",
        "plot "
        + series(duties)
        + f", \\\n     {SATURATED_DUTY} with lines dashtype 2 title 'saturation'",
        "unset multiplot",
    ]
    return "\n".join(lines) + "\n"


def plot_series(csv_path: Path, html: bool = True) -> List[Path]:
    """Write <csv>.gp and, optionally, <csv>.html next to the CSV."""
    csv_path = Path(csv_path)
    df = read_series(csv_path)
    written: List[Path] = []
    gp = csv_path.with_name(csv_path.name + ".gp")
    try:
        gp.write_text(gnuplot_script(csv_path, list(df.columns)), encoding="utf-8")
        written.append(gp)
        if html:
            out = csv_path.with_name(csv_path.name + ".html")
            metrics_figure(df, title=csv_path.parent.name).write_html(out, include_plotlyjs="cdn")
            written.append(out)
    except OSError as e:
        raise SimpoolIOError(f"cannot write plots next to {csv_path}: {e}") from e
    logger.info("wrote %s", ", ".join(str(p) for p in written))
    return written


__all__ = ["gnuplot_script", "metrics_figure", "plot_series", "style_figure"]
