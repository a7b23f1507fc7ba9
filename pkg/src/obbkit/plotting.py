"""Figures written next to the JSON/CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical files
_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_pr_curves(curves: dict, path, title: str = "Precision-recall") -> Path:
    """One step curve per class from ``EvalReport.curves``."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name in sorted(curves):
        c = curves[name]
        if c["recall"]:
            ax.step(c["recall"], c["precision"], where="post", lw=1.2, label=name)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    if curves:
        ax.legend(fontsize=6, ncol=2, loc="lower left")
    return _finish(fig, path)


def plot_confusion(matrix, class_names: Sequence[str], path, normalize: bool = True) -> Path:
    """Rows are ground-truth classes, columns predictions; the last row/column is BG."""
    cm = np.asarray(matrix, dtype=np.float64)
    labels = list(class_names) + ["BG"]
    if normalize:
        rows = cm.sum(axis=1, keepdims=True)
        cm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    n = len(labels)
    fig, ax = plt.subplots(figsize=(0.45 * n + 2, 0.45 * n + 1.5))
    im = ax.imshow(cm, cmap="Blues", vmin=0.0, vmax=1.0 if normalize else None)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, path)


def plot_recall_ablation(table: dict, path, metrics: Sequence[str] = ("R50", "R75", "R85", "AR")) -> Path:
    """Grouped bars of the with/without proposal-NMS recall table."""
    modes = list(table)
    budgets = list(table[modes[0]])
    fig, axes = plt.subplots(1, len(budgets), figsize=(3.2 * len(budgets), 3.2), sharey=True, squeeze=False)
    x = np.arange(len(metrics))
    width = 0.8 / len(modes)
    for ax, b in zip(axes[0], budgets):
        for i, mode in enumerate(modes):
            vals = [table[mode][b][m] for m in metrics]
            ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=mode.replace("_", " "))
        ax.set_xticks(x)
        ax.set_xticklabels(metrics)
        ax.set_title(f"{b} proposals")
        ax.set_ylim(0, 1.05)
    axes[0][0].set_ylabel("recall")
    axes[0][-1].legend(fontsize=7)
    return _finish(fig, path)
