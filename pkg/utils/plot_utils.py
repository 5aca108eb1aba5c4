"""Tidy plot series (series,node,x,value) and their plotly renderings."""

import numpy as np
import pandas as pd
import plotly.graph_objs as go

from utils.fleet_sim import charge
from utils.panel import DemandPanel

SERIES_COLUMNS = ["series", "node", "x", "value"]
DAY_NAMES = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]


def demand_profile_frame(panel: DemandPanel) -> pd.DataFrame:
    """
    Average observed, true and lost demand per node by hour-of-day and day-of-week.

    Series are named e.g. "hour_of_day/true"; x is the hour (0-23) or day (0=Mon).
    """
    index = panel.hour_index()
    groups = {"hour_of_day": index.hour.to_numpy(), "day_of_week": index.dayofweek.to_numpy()}
    values = {"observed": panel.observed, "true": panel.true, "lost": panel.lost()}

    frames = []
    for group_name, labels in groups.items():
        for value_name, grid in values.items():
            for v, node in enumerate(panel.node_ids):
                means = pd.Series(grid[v]).groupby(labels).mean()
                frames.append(
                    pd.DataFrame(
                        {
                            "series": f"{group_name}/{value_name}",
                            "node": node,
                            "x": means.index.to_numpy(),
                            "value": means.to_numpy(),
                        }
                    )
                )
    return pd.concat(frames, ignore_index=True)[SERIES_COLUMNS]


def charging_curve_frame(
    capacity_kwh: float,
    powers_kw=(7.0, 22.0, 50.0),
    soc0: float = 0.2,
    hours: float = 8.0,
    steps: int = 97,
) -> pd.DataFrame:
    """SoC over plug-in time for several charger powers; node holds the power."""
    grid = np.linspace(0.0, hours, steps)
    rows = [
        (f"charging_curve/{capacity_kwh:g}kWh", f"{power:g}kW", float(t), charge(soc0, capacity_kwh, power, float(t)))
        for power in powers_kw
        for t in grid
    ]
    return pd.DataFrame(rows, columns=SERIES_COLUMNS)


def forecast_frame(
    node_ids, hours: np.ndarray, y_true: np.ndarray, y_observed: np.ndarray, quantiles: np.ndarray, levels
) -> pd.DataFrame:
    """Test-set forecasts next to true and observed demand; x is the target hour in epoch seconds."""
    series = {"true": y_true, "observed": y_observed}
    for j, q in enumerate(levels):
        series[f"q{round(q * 100):02d}"] = quantiles[..., j]

    frames = []
    for name, grid in series.items():
        for v, node in enumerate(node_ids):
            frames.append(pd.DataFrame({"series": f"forecast/{name}", "node": node, "x": hours, "value": grid[:, v]}))
    return pd.concat(frames, ignore_index=True)[SERIES_COLUMNS]


def create_series_plot(frame: pd.DataFrame, censored: pd.DataFrame | None = None, x_title: str = "") -> go.Figure:
    """
    One line per (series, node) of a tidy frame.

    `censored` rows (node, x, value) are marked the way the censored hours of a panel are.
    """
    keys = list(frame.groupby(["series", "node"], sort=False).groups)
    colors = {key: f"hsl({(h * 37) % 360}, 70%, 50%)" for h, key in enumerate(keys, start=1)}

    fig = go.Figure()
    for (series, node), group in frame.groupby(["series", "node"], sort=False):
        add_line_plot(fig, group["x"], group["value"], f"{series} [{node}]", colors[(series, node)])

    if censored is not None and not censored.empty:
        add_censored_markers(fig, censored)

    fig.update_layout(layout_args(calculate_y_range(frame["value"].tolist()), x_title))
    return fig


def add_line_plot(fig, x, y, name: str, color: str):
    fig.add_trace(go.Scatter(
        x=x,
        y=y,
        mode="lines",
        name=name,
        line={"color": color, "width": 2},
        showlegend=True,
    ))


def add_censored_markers(fig, censored: pd.DataFrame):
    """Stars on censored hours."""
    fig.add_trace(go.Scatter(
        x=censored["x"],
        y=censored["value"],
        mode="markers",
        name="censored",
        marker={
            "symbol": "star",
            "size": 8,
            "color": "brown",
            "line": {"width": 1, "color": "white"}
        },
        text=censored["node"],
        showlegend=True,
    ))


def calculate_y_range(values: list[float], padding: float = 0.05) -> list:
    """Value range widened by a fraction of its span."""
    finite = [v for v in values if np.isfinite(v)]
    if not finite:
        return [0, 1]
    low, high = min(finite), max(finite)
    pad = (high - low) * padding or 1.0
    return [low - pad, high + pad]


def layout_args(y_range: list, x_title: str = "") -> dict:
    return {
        "yaxis_title": "Demand (kWh)",
        "yaxis": {"range": y_range},
        "xaxis_title": x_title,
        "margin": {"l": 20, "r": 20, "b": 20, "t": 20},
        "hovermode": "x unified",
        "legend": {
            "x": 1.02,
            "y": 1,
            "xanchor": "left",
            "yanchor": "top",
            "bgcolor": "rgba(255,255,255,0.8)",
            "bordercolor": "rgba(0,0,0,0.1)",
            "borderwidth": 1,
        },
    }


def censored_points(panel: DemandPanel) -> pd.DataFrame:
    """(node, x, value) of every censored hour, x as hour-of-panel and value the observed demand."""
    nodes, hours = np.nonzero(panel.censored)
    return pd.DataFrame(
        {
            "node": [panel.node_ids[v] for v in nodes],
            "x": hours,
            "value": panel.observed[nodes, hours],
        }
    )


def write_html(fig: go.Figure, path) -> None:
    fig.write_html(str(path), include_plotlyjs="cdn")
