"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(history: list[dict], path) -> Path:
    """Log-scale curve of every logged loss term against iteration."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if history:
        it = [h["iteration"] for h in history]
        keys = [k for k in history[0] if k not in ("iteration", "frame")]
        for k in keys:
            y = np.array([h.get(k, np.nan) for h in history], dtype=float)
            if np.all(y[np.isfinite(y)] <= 0):
                continue
            ax.plot(it, np.maximum(y, 1e-12), label=k, lw=2.0 if k == "total" else 1.0)
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_metrics(rows: list[dict], path) -> Path:
    """Per-frame PSNR and LiDAR error bars."""
    frames = [str(r["frame"]) for r in rows]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(10, 3.5))
    a0.bar(frames, [r["psnr"] for r in rows], color="tab:blue")
    a0.set_ylabel("PSNR [dB]")
    a0.set_xlabel("frame")
    x = np.arange(len(rows))
    a1.bar(x - 0.2, [r["lidar_l1_mean"] for r in rows], 0.4, label="mean")
    a1.bar(x + 0.2, [r["lidar_l1_median"] for r in rows], 0.4, label="median")
    a1.set_xticks(x, frames)
    a1.set_yscale("log")
    a1.set_ylabel("range L1 [m]")
    a1.set_xlabel("frame")
    a1.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_comparison(gt_color, pred_color, gt_range, pred_range, path, max_range: float | None = None) -> Path:
    """Ground truth against render for one frame: color and range images."""
    fig, ax = plt.subplots(2, 2, figsize=(12, 5), gridspec_kw={"width_ratios": [1, 3]})
    ax[0, 0].imshow(np.clip(gt_color, 0, 1))
    ax[0, 0].set_title("camera GT")
    ax[1, 0].imshow(np.clip(pred_color, 0, 1))
    ax[1, 0].set_title("camera render")
    vmax = max_range or float(np.nanmax(gt_range)) or 1.0
    for a, img, title in ((ax[0, 1], gt_range, "range GT"), (ax[1, 1], pred_range, "range render")):
        im = a.imshow(img, aspect="auto", vmin=0, vmax=vmax, cmap="viridis", origin="lower")
        a.set_title(title)
        fig.colorbar(im, ax=a, fraction=0.02)
    for a in ax.flat:
        a.set_xticks([])
        a.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)
