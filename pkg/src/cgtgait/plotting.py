"""Matplotlib figures for reports (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .skeleton import EMOTIONS  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training_curves(history: Sequence[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    for key in ("total", "ce", "mse", "fr"):
        ax1.plot(epochs, [h[key] for h in history], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    evaluated = [h for h in history if "test_accuracy" in h]
    ax2.plot([h["epoch"] for h in evaluated], [h["test_accuracy"] for h in evaluated], marker=".",
             label="test accuracy")
    ax2.plot(epochs, [h["train_batch_accuracy"] for h in history], label="train (batches)")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend()
    return _save(fig, path)


def plot_confusion(confusion, path, labels: Sequence[str] = EMOTIONS) -> Path:
    cm = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=30)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > cm.max() / 2 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_ablation(report: dict, path) -> Path:
    rows = report["variants"]
    names = [r["variant"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(1.6 * len(rows) + 2, 3.8))
    x = np.arange(len(rows))
    ax1.bar(x - 0.2, [r["accuracy"] for r in rows], 0.4, label="accuracy", color="tab:blue")
    ax1.set_ylabel("accuracy")
    ax1.set_ylim(0, 1.02)
    ax2 = ax1.twinx()
    ax2.bar(x + 0.2, [r["flops"] / 1e6 for r in rows], 0.4, label="MFLOPs", color="tab:orange")
    ax2.set_ylabel("MFLOPs")
    ax1.set_xticks(x, names)
    ax1.set_title(f"ablation: {report['axis']}")
    fig.legend(loc="upper right")
    return _save(fig, path)


def plot_complexity(breakdown: dict, path, title: str = "FLOPs by component") -> Path:
    keys = list(breakdown)
    vals = [breakdown[k] / 1e6 for k in keys]
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(keys) + 1.5))
    ax.barh(keys, vals)
    ax.invert_yaxis()
    ax.set_xlabel("MFLOPs")
    ax.set_title(title)
    return _save(fig, path)
