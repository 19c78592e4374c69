"""
Training-history chart.
"""

import logging
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)

LOSS_SERIES = {
    "loss_ce": {"name": "cross-entropy", "color": "blue"},
    "loss_scl": {"name": "supervised contrastive", "color": "orange"},
    "loss_ucl": {"name": "unsupervised contrastive", "color": "green"},
}
METRIC_SERIES = {
    "val_acc": {"name": "validation accuracy", "color": "gray"},
    "val_wf1": {"name": "validation W-F1", "color": "red"},
}


def history_figure(history: pd.DataFrame) -> go.Figure:
    """Loss components on the left panel, validation metrics on the right."""
    missing = [c for c in ["epoch", *LOSS_SERIES, *METRIC_SERIES] if c not in history.columns]
    if missing:
        raise ValueError(f"History is missing column(s) {missing}")

    fig = make_subplots(rows=1, cols=2, subplot_titles=("Training loss", "Validation"))
    for column, props in LOSS_SERIES.items():
        fig.add_trace(
            go.Scatter(
                x=history["epoch"],
                y=history[column],
                mode="lines",
                name=props["name"],
                line=dict(width=2, color=props["color"]),
            ),
            row=1,
            col=1,
        )
    for column, props in METRIC_SERIES.items():
        fig.add_trace(
            go.Scatter(
                x=history["epoch"],
                y=history[column],
                mode="lines",
                name=props["name"],
                line=dict(width=2, color=props["color"]),
            ),
            row=1,
            col=2,
        )

    best = history.loc[history["val_wf1"].idxmax()]
    fig.add_trace(
        go.Scatter(
            x=[best["epoch"]],
            y=[best["val_wf1"]],
            mode="markers",
            marker=dict(size=12, color="red"),
            name=f"best epoch {int(best['epoch'])}",
            hoverinfo="text",
            text=[f"Epoch: {int(best['epoch'])}<br>W-F1: {best['val_wf1']:.4f}"],
        ),
        row=1,
        col=2,
    )
    fig.update_xaxes(title_text="epoch")
    fig.update_yaxes(range=[0, 1], row=1, col=2)
    fig.update_layout(height=450, margin=dict(l=40, r=20, t=40, b=40))
    return fig


def plot_history(history_path, out_path) -> Path:
    """Render a history CSV to a standalone HTML chart."""
    history = pd.read_csv(history_path)
    if history.empty:
        raise ValueError(f"History file {history_path} has no epochs")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    history_figure(history).write_html(str(out_path), include_plotlyjs="cdn")
    logger.info("Wrote history chart to %s", out_path)
    return out_path
