"""Figure rendering for CLI reports.

File output only: the Agg backend is forced at import so commands work in
headless environments.  Figures are deliberately plain -- one panel, labeled
axes, no styling beyond defaults -- and every function takes an explicit
output path and returns it.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def line_figure(
    path: str,
    x: Sequence[float],
    series: Mapping[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    title: str,
    hline: float | None = None,
    hline_label: str | None = None,
) -> str:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", markersize=3.5, linewidth=1.2, label=name)
    if hline is not None:
        ax.axhline(hline, color="gray", linestyle="--", linewidth=1.0, label=hline_label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1 or hline is not None:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def bar_figure(
    path: str,
    labels: Sequence[str],
    values: Sequence[float],
    ylabel: str,
    title: str,
    hline: float | None = None,
    hline_label: str | None = None,
) -> str:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    pos = np.arange(len(labels))
    ax.bar(pos, values, width=0.6)
    ax.set_xticks(pos)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    if hline is not None:
        ax.axhline(hline, color="crimson", linestyle="--", linewidth=1.0, label=hline_label)
        ax.legend(fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
