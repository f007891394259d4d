"""Figure rendering for CLI reports.

Every command that writes a delimited record (loss CSV, embedding CSV,
attention JSON) also renders a matplotlib figure next to it.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(records, path: str | Path) -> Path:
    """Loss and learning-rate curves from per-epoch training records."""
    path = Path(path)
    epochs = [r.epoch for r in records]
    losses = [r.mean_loss for r in records]
    lrs = [r.lr for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, losses, color="tab:blue", lw=1.5, label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, lrs, color="tab:orange", lw=1.0, alpha=0.7, label="lr")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax.set_title("pretraining loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_attention_figure(series_values: np.ndarray, patch_scores: np.ndarray,
                          window_size: int, path: str | Path) -> Path:
    """Series trace with per-window CLS attention shading underneath."""
    path = Path(path)
    values = np.asarray(series_values)
    if values.ndim == 2:
        values = values[0]
    scores = np.asarray(patch_scores)
    fig, (ax0, ax1) = plt.subplots(
        2, 1, figsize=(8, 4.5), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]},
    )
    ax0.plot(values, lw=1.0, color="black")
    vmax = scores.max() if scores.max() > 0 else 1.0
    for i, s in enumerate(scores):
        ax0.axvspan(i * window_size, (i + 1) * window_size,
                    color="tab:red", alpha=0.5 * float(s / vmax), lw=0)
    ax0.set_ylabel("value")
    ax0.set_title("CLS attention over windows (last layer, head-averaged)")
    ax1.bar(np.arange(len(scores)) * window_size + window_size / 2, scores,
            width=window_size * 0.9, color="tab:red", alpha=0.8)
    ax1.set_xlabel("timestep")
    ax1.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_embedding_scatter(reps: np.ndarray, labels, path: str | Path) -> Path:
    """2-D projection (top two principal components) of representations."""
    path = Path(path)
    reps = np.asarray(reps, dtype=np.float64)
    centered = reps - reps.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    xy = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5.5, 5))
    if labels is None:
        ax.scatter(xy[:, 0], xy[:, 1], s=12, alpha=0.8)
    else:
        labels = np.asarray(labels)
        for lab in np.unique(labels):
            m = labels == lab
            ax.scatter(xy[m, 0], xy[m, 1], s=12, alpha=0.8, label=str(lab))
        ax.legend(title="class", fontsize=8)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("series representations")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
