"""
Unit tests for history_plot.py
"""

import pandas as pd
import pytest

from history_plot import history_figure, plot_history


@pytest.fixture
def history():
    return pd.DataFrame(
        {
            "epoch": [1, 2, 3],
            "loss_ce": [1.1, 0.8, 0.6],
            "loss_scl": [2.0, 1.7, 1.6],
            "loss_ucl": [1.4, 1.3, 1.2],
            "val_acc": [0.4, 0.6, 0.55],
            "val_wf1": [0.35, 0.58, 0.5],
        }
    )


def test_history_figure_traces(history):
    """Three loss curves, two metric curves and a best-epoch marker."""
    fig = history_figure(history)
    names = [trace.name for trace in fig.data]
    assert names[:5] == [
        "cross-entropy",
        "supervised contrastive",
        "unsupervised contrastive",
        "validation accuracy",
        "validation W-F1",
    ]
    assert names[5] == "best epoch 2"
    assert list(fig.data[5].y) == [0.58]


def test_history_figure_requires_columns(history):
    """A history without the metric columns is rejected."""
    with pytest.raises(ValueError, match="val_wf1"):
        history_figure(history.drop(columns=["val_wf1"]))


def test_plot_history_writes_html(tmp_path, history):
    """The chart is written as standalone HTML, creating parent directories."""
    source = tmp_path / "history.csv"
    history.to_csv(source, index=False)
    out = plot_history(source, tmp_path / "charts" / "history.html")
    assert out.is_file()
    assert "<html>" in out.read_text(encoding="utf-8")


def test_plot_history_rejects_empty_file(tmp_path, history):
    """A header-only history has nothing to plot."""
    source = tmp_path / "history.csv"
    history.iloc[0:0].to_csv(source, index=False)
    with pytest.raises(ValueError, match="no epochs"):
        plot_history(source, tmp_path / "out.html")
