"""Matplotlib rendering for the report paths.

Figures are written next to the delimited outputs: log-rate curve
overlays (truth vs fits), MSE-versus-sample-size trends, and terminal
outcome bars.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

LINE_STYLES = {
    "true": {"color": "black", "lw": 1.8},
    "freq": {"color": "tab:blue", "lw": 1.4},
    "emvs": {"color": "tab:red", "lw": 1.4},
}


def _new_axes(xlabel: str, ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=150)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=11)
    ax.grid(alpha=0.3)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_curve_comparison(path, grid: np.ndarray, curves: dict[str, np.ndarray], arm) -> Path:
    """Overlay log-rate curves ({label: values}) for one arm."""
    fig, ax = _new_axes("z", "log rate", f"arm {arm[0]} -> {arm[1]}")
    for label, values in curves.items():
        style = LINE_STYLES.get(label, {"lw": 1.4})
        ax.plot(grid, values, label=label, **style)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_mse_trend(path, frame: pd.DataFrame) -> Path:
    """MSE against sample size, one line per method.

    Expects columns n, method, value (already averaged per point).
    """
    fig, ax = _new_axes("sample size", "mean MSE", "log-rate MSE vs sample size")
    for method, group in frame.groupby("method"):
        group = group.sort_values("n")
        style = LINE_STYLES.get(method, {"lw": 1.4})
        ax.plot(group["n"], group["value"], marker="o", label=method, **style)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_absorption_bars(path, report) -> Path:
    """Side-by-side terminal-outcome probabilities, true vs estimated."""
    outcomes = report.outcomes
    x = np.arange(len(outcomes))
    fig, ax = _new_axes("terminal outcome", "probability", "terminal outcome distribution")
    width = 0.38
    ax.bar(x - width / 2, [report.p_true[o] for o in outcomes], width,
           label="true", color="0.25")
    ax.bar(x + width / 2, [report.p_est[o] for o in outcomes], width,
           label="estimated", color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels(outcomes)
    ax.legend(frameon=False)
    return _save(fig, path)
