"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(histories: dict, path, smooth: int = 50) -> Path:
    """Photometric loss per block, with a running mean over ``smooth`` iterations."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for bid, h in sorted(histories.items()):
        h = np.asarray(h, dtype=np.float64)
        if h.size == 0:
            continue
        k = max(1, min(smooth, h.size))
        curve = np.convolve(h, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(curve.size) + k, curve, lw=1.2, label=f"block {bid}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("photometric loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_partition(blocks, centers, path, up_axis: int = 2) -> Path:
    """Core and expanded rectangles over the ground-plane camera positions."""
    from .partitioner import ground_axes

    a, b = ground_axes(up_axis)
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = plt.cm.tab10(np.arange(len(blocks)) % 10)
    for blk, col in zip(blocks, colors):
        core, exp = blk.core_bounds, blk.expanded_bounds
        ax.add_patch(Rectangle((core.xmin, core.ymin), core.width, core.height, facecolor=col, alpha=0.15))
        ax.add_patch(Rectangle((exp.xmin, exp.ymin), exp.width, exp.height, fill=False, edgecolor=col,
                               ls="--", lw=1.2))
        cx, cy = blk.core_bounds.center
        ax.text(cx, cy, str(blk.id), ha="center", va="center", fontsize=10)
    ax.scatter(c[:, a], c[:, b], s=10, c="k", zorder=3)
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    return _save(fig, path)


def plot_depth_error(pred, gt, path, threshold: float = 0.6) -> Path:
    """Absolute depth error map next to its histogram."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = np.abs(pred - gt)
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3.5))
    im = a0.imshow(err, cmap="magma", vmin=0, vmax=max(2 * threshold, 1e-6))
    a0.set_title("|depth error| (m)")
    a0.axis("off")
    fig.colorbar(im, ax=a0, fraction=0.046)
    e = err[np.isfinite(err)]
    if e.size:
        a1.hist(np.minimum(e, 4 * threshold), bins=40, color="0.4")
    a1.axvline(threshold, color="r", ls="--", lw=1)
    a1.set_xlabel("error (m)")
    a1.set_ylabel("pixels")
    return _save(fig, path)


def plot_metric_bars(values: dict, path, ylabel: str = "PAG (%)") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    names = list(values)
    ax.bar(range(len(names)), [values[k] for k in names], color="0.5")
    ax.set_xticks(range(len(names)), names, rotation=20)
    ax.set_ylabel(ylabel)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)
