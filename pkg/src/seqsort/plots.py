"""Report figures rendered to PNG files (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def confusion_figure(matrix: np.ndarray, names: Sequence[str], title: str, path: str | Path) -> Path:
    """Row-normalized confusion matrix with raw counts annotated."""
    matrix = np.asarray(matrix)
    rows = matrix.sum(axis=1, keepdims=True)
    norm = np.divide(matrix, rows, out=np.zeros(matrix.shape, dtype=float), where=rows > 0)
    k = len(names)
    fig, ax = plt.subplots(figsize=(0.45 * k + 2.5, 0.45 * k + 2))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(k), names, rotation=90, fontsize=7)
    ax.set_yticks(range(k), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    for i, j in zip(*np.nonzero(matrix)):
        ax.text(j, i, str(matrix[i, j]), ha="center", va="center", fontsize=6,
                color="white" if norm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def training_curves(records, path: str | Path) -> Path:
    """Loss curves (top) and the learning-rate schedule (bottom)."""
    epochs = [r.epoch for r in records]
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    a1.plot(epochs, [r.train_loss for r in records], label="train")
    val = [(r.epoch, r.val_loss_sum) for r in records if r.val_loss_sum is not None]
    if val:
        a1.plot(*zip(*val), label="val (seq + plane)")
    a1.set_ylabel("loss")
    a1.legend()
    a2.plot(epochs, [r.lr_at_epoch_end for r in records], color="tab:green")
    a2.set_ylabel("learning rate")
    a2.set_xlabel("epoch")
    return _save(fig, path)


def gradcam_overlay(image: np.ndarray, heat: np.ndarray, title: str, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, cmap="gray")
    ax.imshow(heat, cmap="jet", alpha=0.4, vmin=0, vmax=1)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    return _save(fig, path)
