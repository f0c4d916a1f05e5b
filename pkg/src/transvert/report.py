"""PNG figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(rows, path):
    """Generator/discriminator losses and the l1 term against the step."""
    step = np.array([r["step"] for r in rows])
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.6))
    a.plot(step, [r["loss_g"] for r in rows], label="generator")
    a.plot(step, [r["loss_d"] for r in rows], label="discriminator")
    a.set_xlabel("step")
    a.set_ylabel("loss")
    a.legend()
    b.semilogy(step, [max(r["l1_term"], 1e-12) for r in rows], color="C2")
    b.set_xlabel("step")
    b.set_ylabel("l1 term")
    return _save(fig, path)


def ablation_bars(rows, path):
    names = [r["row"] for r in rows]
    dice = [100 * float(r["dice_mean"]) for r in rows]
    ref = [float(r["reference_dice_pct"]) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(rows)), 3.8))
    ax.bar(x - 0.2, dice, 0.4, label="this run (phantoms)")
    ax.bar(x + 0.2, ref, 0.4, label="published (clinical CT)", alpha=0.6)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("Dice (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def view_panels(images, path, titles=None):
    """Row of 2-D arrays shown with z running down."""
    fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 3.4), squeeze=False)
    for j, (ax, im) in enumerate(zip(axes[0], images)):
        ax.imshow(np.asarray(im).T, cmap="gray", aspect="equal")
        ax.set_axis_off()
        if titles:
            ax.set_title(titles[j], fontsize=9)
    return _save(fig, path)


def chamfer_map(points, distances, path, title=None):
    """Point cloud coloured by distance to the other cloud."""
    p = np.asarray(points)
    fig = plt.figure(figsize=(4.5, 4))
    ax = fig.add_subplot(projection="3d")
    sc = ax.scatter(p[:, 0], p[:, 1], p[:, 2], c=distances, s=3, cmap="viridis")
    fig.colorbar(sc, ax=ax, shrink=0.7, label="mm")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
