"""Report figures rendered to PNG files with matplotlib's non-interactive backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402
from .loss import ContributionRow  # noqa: E402
from .optim import EpochRecord  # noqa: E402

# Fixed metadata keeps PNG bytes stable between runs.
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_roc(report: MetricsReport, path: str | Path, title: str = "ROC") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    for c in report.classes:
        if c.roc is None:
            continue
        ax.plot(c.roc.fpr, c.roc.tpr, lw=1.2, label=f"{c.row.class_name} ({c.row.auc:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7)
    return _save(fig, path)


def plot_contributions(rows: Sequence[ContributionRow], path: str | Path,
                       title: str = "Loss contribution by label") -> Path:
    """Side-by-side positive/negative contribution bars per class."""
    names = [r.class_name for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.55 * len(rows) + 2), 3.6))
    ax.bar(x - 0.2, [r.pos_contribution for r in rows], width=0.4, label="positive")
    ax.bar(x + 0.2, [r.neg_contribution for r in rows], width=0.4, label="negative")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("contribution")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_training(history: Sequence[EpochRecord], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [r.epoch for r in history]
    ax.plot(epochs, [r.mean_loss for r in history], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax2 = ax.twinx()
    ax2.step(epochs, [r.lr for r in history], where="post", color="C1", lw=0.9)
    ax2.set_ylabel("learning rate", color="C1")
    ax2.set_yscale("log")
    return _save(fig, path)
