"""Matplotlib renderings of the report outputs (PNG next to the CSV/JSON)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(metrics_csv: str | Path, out_png: str | Path) -> None:
    steps, losses = [], []
    with open(metrics_csv) as fp:
        for row in csv.DictReader(fp):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("batch loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_ablation_chart(rows: list[dict], out_png: str | Path) -> None:
    """Bar chart of held-out precision per ablation configuration."""
    modes = [r["mode"] for r in rows]
    p10 = [float(r["precision@10"]) for r in rows]
    p20 = [float(r["precision@20"]) for r in rows]
    x = np.arange(len(modes))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, p10, width=0.4, label="precision@10px")
    ax.bar(x + 0.2, p20, width=0.4, label="precision@20px")
    ax.set_xticks(x, modes, rotation=15)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_precision_curve(center_errors: np.ndarray, out_png: str | Path, max_radius: int = 30) -> None:
    radii = np.arange(0, max_radius + 1)
    errors = np.asarray(center_errors)
    curve = [(errors <= r).mean() if len(errors) else 0.0 for r in radii]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(radii, curve, lw=1.5)
    ax.set_xlabel("center-error threshold (px)")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_top_heatmap(frame_pixels: np.ndarray, top: np.ndarray, out_png: str | Path) -> None:
    """Prior map rendered over its frame."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    axes[0].imshow(frame_pixels, cmap="gray" if frame_pixels.ndim == 2 else None)
    axes[0].set_title("frame")
    axes[1].imshow(top, cmap="inferno")
    axes[1].set_title("objectness prior")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
