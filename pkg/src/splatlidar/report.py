"""Per-frame evaluation of a reconstructed scene against ground truth."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .io import atomic_write
from .metrics import lidar_errors, psnr, ssim
from .scene import Scene
from .train import Observation, TrainConfig, render_frame

FIELDS = ("frame", "psnr", "ssim", "lidar_l1_mean", "lidar_l1_median")


def evaluate(scene: Scene, observations: dict[int, Observation], frames, config: TrainConfig | None = None,
             keep_renders: bool = False):
    """Metrics rows per frame plus an ``aggregate`` row (pooled LiDAR errors, mean image metrics)."""
    config = config or TrainConfig()
    rows, renders, pooled = [], {}, []
    for f in frames:
        r = render_frame(scene, f, config, need_actor_opacity=False)
        obs = observations[f]
        err = lidar_errors(r.lidar.detach(), obs.ranges)
        pooled.append(err)
        rows.append({
            "frame": f,
            "psnr": psnr(r.camera.color, obs.color),
            "ssim": ssim(r.camera.color, obs.color),
            "lidar_l1_mean": float(err.mean()) if err.size else 0.0,
            "lidar_l1_median": float(np.median(err)) if err.size else 0.0,
        })
        if keep_renders:
            renders[f] = r
    if rows:
        allerr = np.concatenate(pooled)
        rows.append({
            "frame": "aggregate",
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "lidar_l1_mean": float(allerr.mean()) if allerr.size else 0.0,
            "lidar_l1_median": float(np.median(allerr)) if allerr.size else 0.0,
        })
    return (rows, renders) if keep_renders else rows


def write_csv(rows: list[dict], path, fields=None) -> None:
    fields = list(fields or (rows[0].keys() if rows else FIELDS))
    with atomic_write(path, "w") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items() if k in fields})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def loss_fields(history: list[dict]) -> list[str]:
    keys = ["iteration"]
    for h in history:
        for k in h:
            if k not in keys and k != "frame":
                keys.append(k)
    if "total" in keys:
        keys.remove("total")
        keys.append("total")
    return keys


def write_loss_csv(history: list[dict], path) -> None:
    write_csv(history, Path(path), loss_fields(history))
