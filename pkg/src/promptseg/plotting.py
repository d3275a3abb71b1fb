"""Figures written to files: mask overlays, training curves, ablation bars."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

_CMAP = plt.get_cmap("tab10")


def class_colour(c: int) -> np.ndarray:
    return np.asarray(_CMAP(c % 10)[:3])


def blend(image: np.ndarray, labeled: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Tint pixels of ``image`` by class; ``labeled`` holds 0 for background, else class id + 1."""
    out = image.astype(np.float64).copy()
    for c in np.unique(labeled):
        if c == 0:
            continue
        sel = labeled == c
        out[sel] = (1 - alpha) * out[sel] + alpha * class_colour(int(c) - 1)
    return np.clip(out, 0, 1)


def overlay_figure(path: str | Path, image: np.ndarray, pred: np.ndarray, names: Mapping[int, str],
                   gt: np.ndarray | None = None, title: str | None = None) -> Path:
    """Image, predicted overlay and (optionally) ground-truth overlay side by side."""
    panels = [("input", image), ("prediction", blend(image, pred))]
    if gt is not None:
        panels.append(("ground truth", blend(image, gt)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.6))
    for ax, (label, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(label)
        ax.axis("off")
    shown = sorted({int(c) for arr in (pred, gt) if arr is not None for c in np.unique(arr) if c > 0})
    if shown:
        fig.legend(handles=[Patch(color=class_colour(c - 1), label=names.get(c - 1, str(c - 1))) for c in shown],
                   loc="lower center", ncol=min(len(shown), 4), fontsize=8, frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout(rect=(0, 0.08 if shown else 0, 1, 1))
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def training_figure(path: str | Path, train_loss: Sequence[float],
                    val: Mapping[int, Mapping[str, float]]) -> Path:
    """Loss per epoch and the validation IoUs at each evaluated epoch."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(range(len(train_loss)), train_loss, marker=".")
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    epochs = sorted(val)
    for metric in ("ch_iou", "isi_iou", "mc_iou"):
        b.plot(epochs, [val[e][metric] for e in epochs], marker="o", label=metric)
    b.set_xlabel("epoch")
    b.set_ylabel("val IoU (gated, refined)")
    b.set_ylim(0, 1)
    b.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def variants_figure(path: str | Path, reports: Mapping[str, Mapping[str, float]],
                    metrics: Sequence[str] = ("ch_iou", "isi_iou", "fpr", "f1")) -> Path:
    """Grouped bars comparing evaluation variants (gating / refinement on or off)."""
    names = list(reports)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(1.8 * len(metrics) + 2, 3.5))
    for i, n in enumerate(names):
        ax.bar(x + i * width, [reports[n][m] for m in metrics], width, label=n)
    ax.set_xticks(x + width * (len(names) - 1) / 2, metrics)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def ablation_figure(path: str | Path, rows: Sequence[str], values: Mapping[str, Sequence[float]],
                    title: str = "") -> Path:
    """Horizontal grouped bars, one group per ablation row."""
    metrics = list(values)
    y = np.arange(len(rows))
    h = 0.8 / max(len(metrics), 1)
    fig, ax = plt.subplots(figsize=(7, 0.6 * len(rows) + 1.5))
    for i, m in enumerate(metrics):
        ax.barh(y + i * h, values[m], h, label=m)
    ax.set_yticks(y + h * (len(metrics) - 1) / 2, [r.strip() for r in rows])
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
