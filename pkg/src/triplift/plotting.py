"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(history, path) -> None:
    h = np.asarray(history, dtype=np.float64).reshape(-1, 5)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, name in enumerate(("rgb", "iou", "perceptual", "total"), start=1):
        ax.plot(h[:, 0], h[:, i], label=name, lw=1.0 if name != "total" else 1.6)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_reprojection(reports, path) -> None:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.5))
    names = [r.name for r in reports]
    ax0.bar(names, [r.mean for r in reports], color="0.4")
    ax0.set_ylabel("mean reprojection error")
    for r in reports:
        if r.errors:
            ax1.hist(r.errors, bins=20, alpha=0.6, label=r.name)
    ax1.set_xlabel("per-pair error")
    ax1.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_composite(image, labels, path) -> None:
    h, w = image.shape[:2]
    fig = plt.figure(figsize=(w / 100, h / 100), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(np.clip(image, 0, 1), interpolation="nearest")
    for lab in labels:
        x1, y1, x2, y2 = lab.bbox2d
        ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, ec="yellow", lw=1))
    ax.set_axis_off()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
