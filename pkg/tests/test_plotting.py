from __future__ import annotations

import plotly.graph_objects as go
import pytest

from simpool.errors import SimpoolIOError
from simpool.lib.kernel import HOUR
from simpool.lib.metrics import SeriesLayout, read_series
from simpool.lib.plotting import gnuplot_script, metrics_figure, plot_series, style_figure
from simpool.scenarios import run_scenario


@pytest.fixture
def metrics_csv(small_config, tmp_path):
    return run_scenario(small_config, tmp_path / "run", until=HOUR).metrics_csv


def test_gnuplot_script_plots_columns_by_name(tmp_path):
    layout = SeriesLayout(providers=("grid", "nersc"), collectors=("top",), schedds=("s0",))
    script = gnuplot_script(tmp_path / "metrics.csv", layout.columns)
    assert "set output 'metrics.csv.png'" in script
    assert "column('cores_grid')" in script and "column('cores_nersc')" in script
    assert "column('duty_top')" in script
    assert "set multiplot layout 3,1" in script
    assert script.endswith("unset multiplot\n")


def test_metrics_figure_has_a_trace_per_series(metrics_csv):
    df = read_series(metrics_csv)
    fig = metrics_figure(df, title="small")
    names = [t.name for t in fig.data]
    assert names[:2] == ["running", "idle"]
    assert "grid" in names and "duty top" in names
    assert fig.layout.height >= 550


def test_style_figure_leaves_empty_input_alone():
    assert style_figure(None) is None
    fig = style_figure(go.Figure(), auto_height=False)
    assert fig.layout.template is not None
    assert fig.layout.height is None


def test_plot_series_writes_next_to_the_csv(metrics_csv):
    gp, html = plot_series(metrics_csv)
    assert gp.name == "metrics.csv.gp" and gp.parent == metrics_csv.parent
    assert html.name == "metrics.csv.html"
    assert "plotly" in html.read_text()
    assert plot_series(metrics_csv, html=False) == [gp]


def test_plot_series_of_a_missing_csv(tmp_path):
    with pytest.raises(SimpoolIOError):
        plot_series(tmp_path / "metrics.csv")
