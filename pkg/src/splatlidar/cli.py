"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from . import plotting
from .camera import rasterize_camera
from .dataset import load_dataset, write_dataset
from .io import (
    DataError, atomic_write, intrinsics_from_json, lidar_spec_from_json, load_scene, pose_from_json, read_json,
    read_lri, read_splat_ply, save_scene, sidecar_path, write_depth, write_lri, write_png,
)
from .lidar import range_to_pointcloud, rasterize_lidar
from .losses import LossWeights
from .report import evaluate, write_csv, write_loss_csv
from .scene import apply_actor_edit, compose_scene, lateral_shift
from .train import TrainConfig, fit

log = logging.getLogger("splatlidar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def train_config_from_json(d: dict) -> tuple[TrainConfig, LossWeights]:
    d = dict(d)
    weights = LossWeights(**d.pop("weights", {}))
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown training options {sorted(unknown)}")
    if "background" in d:
        d["background"] = tuple(d["background"])
    return TrainConfig(**d), weights


def _model_for_render(path, frame: int):
    if sidecar_path(path).exists():
        scene = load_scene(path)
        return compose_scene(scene, frame, "camera"), compose_scene(scene, frame, "lidar")
    model, _ = read_splat_ply(path)
    return model, model


def cmd_scenegen(args) -> int:
    write_dataset(read_json(args.scene), args.out_dir)
    print(f"wrote dataset to {args.out_dir}")
    return 0


def cmd_render(args) -> int:
    if (args.camera is None) == (args.lidar is None):
        raise UsageError("render needs exactly one of --camera or --lidar")
    pose = pose_from_json(read_json(args.pose))
    cam_model, lidar_model = _model_for_render(args.splat, args.frame)
    out = Path(args.out)
    if args.camera is not None:
        K = intrinsics_from_json(read_json(args.camera))
        bg = torch.as_tensor(args.background, dtype=torch.float64) if args.background else None
        with torch.no_grad():
            r = rasterize_camera(cam_model, pose, K, background=bg)
        write_png(out, r.color)
        write_depth(out.with_suffix(".dep"), r.depth)
    else:
        spec = lidar_spec_from_json(read_json(args.lidar))
        with torch.no_grad():
            ri = rasterize_lidar(lidar_model, pose, spec)
        write_lri(out, ri, spec)
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    config, weights = train_config_from_json(read_json(args.config) if args.config else {})
    if config.frames is None:
        config.frames = data.train_frames
    if "background" not in (read_json(args.config) if args.config else {}):
        config.background = data.sky_color
    if args.iterations is not None:
        config.iterations = args.iterations
    history: list[dict] = []
    scene = fit(data.init, data.observations, config, weights, history=history)
    out = Path(args.out)
    save_scene(out, scene)
    write_loss_csv(history, out.with_suffix(".loss.csv"))
    plotting.plot_loss_curve(history, out.with_suffix(".loss.png"))
    print(f"wrote {out} ({len(scene.background)} background splats, {len(history)} iterations)")
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    scene = load_scene(args.splat)
    frames = data.holdout if args.frames == "holdout" else sorted(data.observations)
    if not frames:
        frames = sorted(data.observations)
    config = TrainConfig(background=data.sky_color)
    rows, renders = evaluate(scene, data.observations, frames, config, keep_renders=True)
    report = Path(args.report)
    write_csv(rows, report)
    plotting.plot_metrics([r for r in rows if r["frame"] != "aggregate"], report.with_suffix(".png"))
    f0 = frames[0]
    r = renders[f0]
    obs = data.observations[f0]
    plotting.plot_comparison(
        obs.color, r.camera.color.detach().numpy(),
        np.where(obs.ranges.valid.numpy(), obs.ranges.ranges.numpy(), np.nan),
        np.where(r.lidar.valid.numpy(), r.lidar.ranges.detach().numpy(), np.nan),
        report.with_name(f"{report.stem}_frame{f0:04d}.png"),
    )
    agg = rows[-1]
    print(f"psnr {agg['psnr']:.3f} dB  ssim {agg['ssim']:.4f}  lidar L1 mean {agg['lidar_l1_mean']:.4f} m  "
          f"median {agg['lidar_l1_median']:.4f} m")
    return 0


def cmd_pointcloud(args) -> int:
    ri = read_lri(args.range)
    gamma = math.inf if args.gamma_th.lower() in ("inf", "infinity") else float(args.gamma_th)
    pts = range_to_pointcloud(ri, ri.spec, gamma)
    rows = np.empty(len(pts), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    rows["x"], rows["y"], rows["z"] = pts.T if len(pts) else (np.zeros(0),) * 3
    with atomic_write(args.out) as fh:
        PlyData([PlyElement.describe(rows, "vertex")], text=False, byte_order="<").write(fh)
    print(f"wrote {len(pts)} points to {args.out}")
    return 0


def cmd_edit(args) -> int:
    scene = load_scene(args.scene)
    try:
        edited = apply_actor_edit(scene, args.actor, lateral_shift(args.shift, args.axis))
    except KeyError as e:
        raise DataError(str(e)) from e
    out = args.out or args.scene
    save_scene(out, edited)
    print(f"shifted actor {args.actor} by {args.shift} m ({args.axis}) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatlidar", description="Joint camera and LiDAR Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("scenegen", help="ray-cast a ground-truth dataset from a scene description")
    s.add_argument("scene")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_scenegen)

    s = sub.add_parser("render", help="render a splat file through one camera or LiDAR pose")
    s.add_argument("--splat", required=True)
    s.add_argument("--pose", required=True, help="camera-from-world or world-from-lidar pose (JSON)")
    s.add_argument("--camera", help="camera intrinsics (JSON)")
    s.add_argument("--lidar", help="LiDAR spec (JSON)")
    s.add_argument("--frame", type=int, default=0, help="frame for actor poses when a sidecar exists")
    s.add_argument("--background", type=float, nargs=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", help="optimize the dataset's initial scene")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--iterations", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-frame metrics CSV and figures")
    s.add_argument("--splat", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--frames", choices=("holdout", "all"), default="holdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pointcloud", help="range image to uncertainty-filtered point cloud")
    s.add_argument("--range", required=True)
    s.add_argument("--gamma-th", default="1.0")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pointcloud)

    s = sub.add_parser("edit", help="shift one actor's trajectory")
    s.add_argument("--scene", required=True)
    s.add_argument("--actor", required=True)
    s.add_argument("--shift", type=float, required=True)
    s.add_argument("--axis", choices=("lateral", "forward", "vertical"), default="lateral")
    s.add_argument("--out")
    s.set_defaults(func=cmd_edit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError, KeyError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
