"""Figure rendering for the report path.

Every command that writes a delimited text artifact also renders a small
matplotlib figure next to it: the training loss curve beside the loss
log, and per-K metric bars beside the metrics report.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

FIGURE_DPI = 120


def save_loss_curve(losses, path: str | os.PathLike, title: str = "Training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pairwise loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def save_metric_bars(report, path: str | os.PathLike, title: str = "Ranking metrics") -> None:
    ks = list(report.ks)
    x = range(len(ks))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([i - width / 2 for i in x], [report.recall[k] for k in ks], width, label="Recall@K")
    ax.bar([i + width / 2 for i in x], [report.ndcg[k] for k in ks], width, label="NDCG@K")
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("K")
    ax.set_ylabel("metric value")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
