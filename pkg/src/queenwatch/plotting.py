"""Figures written next to the tabular report output.

Everything renders through the Agg backend to files; nothing opens a window.
PNG metadata is pinned so repeated runs produce identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .features import FEATURE_NAMES  # noqa: E402

_METADATA = {"Software": None}
_LABELS = ("Queenless", "Queenright")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)
    return path


def confusion_figure(report, path, title="Confusion matrix (row-normalized)") -> Path:
    cm = report.confusion.astype(float)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(norm, vmin=0.0, vmax=1.0, cmap="Blues")
    for i in range(2):
        for j in range(2):
            colour = "white" if norm[i, j] > 0.5 else "black"
            ax.text(j, i, f"{norm[i, j]:.2f}\n({int(cm[i, j])})", ha="center", va="center", color=colour)
    ax.set_xticks([0, 1], _LABELS)
    ax.set_yticks([0, 1], _LABELS)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def importance_figure(forest, path, kind="gain") -> Path:
    counts, gains = forest.importance
    values = np.asarray(gains if kind == "gain" else counts, dtype=float)
    total = values.sum()
    if total > 0:
        values = values / total
    names = [FEATURE_NAMES[i] for i in forest.feature_mask]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.barh(names[::-1], values[::-1], color="tab:orange")
    ax.set_xlabel("Relative importance (%s)" % ("gain" if kind == "gain" else "splits"))
    ax.set_xlim(0, max(1.0, float(values.max(initial=0.0))))
    ax.set_title("Feature importance")
    fig.tight_layout()
    return _save(fig, path)


def ablation_figure(rows, path, names=None) -> Path:
    from .evaluate import subset_name

    labels = names or [subset_name(r.subset) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7.5, 3.6))
    ax.bar(x - 0.2, [100 * r.val_mean for r in rows], 0.4, yerr=[100 * r.val_std for r in rows],
           label="Validation", capsize=2)
    ax.bar(x + 0.2, [100 * r.test_mean for r in rows], 0.4, yerr=[100 * r.test_std for r in rows],
           label="Test", capsize=2)
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel("Accuracy (%)")
    low = min([100 * min(r.val_mean, r.test_mean) for r in rows] + [100.0])
    ax.set_ylim(max(0.0, low - 5.0), 100.5)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def loss_figure(forest, path) -> Path:
    hist = np.asarray(forest.history, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    if hist.size:
        ax.plot(np.arange(len(hist)), hist[:, 1], label="validation")
        ax.axvline(len(forest.trees), color="grey", linestyle=":", label="kept")
    ax.set_xlabel("Boosting round")
    ax.set_ylabel("Weighted log-loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
