"""Figure rendering for reports.  Output is byte-stable for fixed input."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "mailscan"


def plot_roc(points: Sequence[tuple[float, float]], auc: float | None, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    xs, ys = zip(*points) if points else ((), ())
    ax.plot(xs, ys, drawstyle="default", marker="o", markersize=3,
            label=f"ACFG score (AUC {auc:.3f})" if auc is not None else "ACFG score")
    ax.plot([0, 1], [0, 1], linestyle="--", linewidth=0.8, color="grey")
    ax.set_xlim(-0.01, 1.01)
    ax.set_ylim(-0.01, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("detection rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_kind_rates(rates: dict[str, float], path: str | Path, title: str = "") -> Path:
    """Bar chart of per-obfuscation detection rates."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(rates)
    ax.bar(range(len(names)), [rates[n] for n in names])
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("detection rate")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_scores(names: Sequence[str], scores: Sequence[float], flagged: Sequence[bool],
                path: str | Path) -> Path:
    """Per-input ACFG scores, flagged inputs drawn in a second colour."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * len(names) + 1.5), 3.5))
    colours = ["tab:red" if f else "tab:blue" for f in flagged]
    ax.bar(range(len(names)), scores, color=colours)
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=6)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("ACFG similarity")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
