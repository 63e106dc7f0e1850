"""Loss-curve figures written next to the JSON-lines reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def moving_average(x, window):
    x = np.asarray(x, dtype=np.float64)
    if window <= 1 or len(x) < window:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def plot_curves(path, curves, xlabel="step", title="", logy=True):
    """``curves`` maps a label to ``(xs, ys)``; saves a PNG at ``path``."""
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_train_report(path, report):
    steps = [r["step"] for r in report]
    curves = {
        "content": (steps, [r["loss_content"] for r in report]),
        "semantic": (steps, [r["loss_semantic"] for r in report]),
    }
    return plot_curves(path, curves, title="training loss")


def plot_pretrain_history(path, history, window=50):
    ma = moving_average(history, window)
    xs = np.arange(len(ma)) + min(window, len(history))
    return plot_curves(path, {f"loss ({window}-step mean)": (xs, ma)}, title="decoder pretraining")
