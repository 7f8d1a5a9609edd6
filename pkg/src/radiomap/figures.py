"""Matplotlib figure emission for the CLI report paths.

Every reporting command writes PNG figures next to its CSV output: map
heatmaps, side-by-side comparison strips, error-vs-sample-count curves,
training histories, and the benchmark scaling plot. All functions render
to files (Agg backend); nothing opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_CMAP = "viridis"


def save_heatmap(grid, path, title: str | None = None, vmin=0.0, vmax=1.0) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    im = ax.imshow(np.asarray(grid), cmap=_CMAP, vmin=vmin, vmax=vmax,
                   interpolation="nearest")
    if title:
        ax.set_title(title, fontsize=10)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_strip(grids_list, labels, path, vmin=0.0, vmax=1.0,
               marks=None) -> None:
    """Side-by-side comparison strip; `marks` optionally holds per-panel
    lists of (row, col) points to overlay."""
    n = len(grids_list)
    fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.2))
    if n == 1:
        axes = [axes]
    for i, (g, lab) in enumerate(zip(grids_list, labels)):
        ax = axes[i]
        ax.imshow(np.asarray(g), cmap=_CMAP, vmin=vmin, vmax=vmax,
                  interpolation="nearest")
        if marks and marks[i]:
            pts = np.asarray(marks[i], dtype=float)
            ax.scatter(pts[:, 1], pts[:, 0], s=12, c="red", marker="x")
        ax.set_title(lab, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_error_vs_k(rows, path, ylabel="NMSE") -> None:
    """rows: (method, k, value); methods with k=None become horizontal
    baselines, mirroring the usual measurement-sweep comparison figure."""
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    methods: dict[str, list] = {}
    for method, k, val in rows:
        methods.setdefault(method, []).append((k, val))
    ks_all = sorted({k for _, k, _ in rows if k is not None})
    for method, pts in methods.items():
        if pts[0][0] is None:
            val = pts[0][1]
            ax.axhline(val, linestyle="--", alpha=0.8,
                       label=f"{method} ({val:.3g})")
        else:
            pts = sorted(pts)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=method)
    if ks_all:
        ax.set_xticks(ks_all)
    ax.set_xlabel("number of measurements k")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_history(history, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], label="train")
    if any(np.isfinite(h.get("val_loss", np.nan)) for h in history):
        ax.plot(epochs, [h["val_loss"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_scaling(points, fitted_exponent, path, xlabel="n",
                 title="inference time scaling") -> None:
    """points: (size, seconds); log-log scatter plus the fitted power law."""
    sizes = np.array([p[0] for p in points], dtype=float)
    times = np.array([p[1] for p in points], dtype=float)
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    ax.loglog(sizes, times, "o", label="measured")
    anchor = times[0] / sizes[0] ** fitted_exponent
    ax.loglog(sizes, anchor * sizes ** fitted_exponent, "--",
              label=f"fit exponent {fitted_exponent:.2f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("seconds")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_localization(buildings, intersection, true_pos, est_pos, tx_points, path) -> None:
    """Overlay of the chosen level-set intersection, the true and the
    estimated receiver positions, and the transmitters."""
    h, w = buildings.shape
    img = np.zeros((h, w, 3))
    img[..., 2] = buildings * 0.9
    if intersection is not None:
        img[intersection, 0] = 0.9
        img[intersection, 1] = 0.9
    fig, ax = plt.subplots(figsize=(4.6, 4.4))
    ax.imshow(img, interpolation="nearest")
    pts = np.asarray(tx_points, dtype=float)
    ax.scatter(pts[:, 1], pts[:, 0], s=30, facecolors="none", edgecolors="lime",
               label="tx")
    ax.scatter([true_pos[1]], [true_pos[0]], s=60, c="lime", marker="+",
               label="true rx")
    ax.scatter([est_pos[1]], [est_pos[0]], s=60, c="red", marker="x",
               label="estimate")
    ax.legend(fontsize=8, loc="upper right")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
