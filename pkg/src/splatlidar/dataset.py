"""On-disk synthetic datasets: ground-truth frames plus the initial splat scene."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .io import (
    DataError, load_scene, read_depth, read_json, read_lri, read_mask, read_png, save_scene, write_depth,
    write_json, write_lri, write_png,
)
from .scene import Scene
from .scenegen import holdout_frames, init_splats, raycast_camera, raycast_lidar, scene_from_config
from .train import Observation

INIT_NAME = "init.ply"


def frame_stem(root: Path, frame: int) -> Path:
    return Path(root) / "frames" / f"{frame:04d}"


@dataclass
class Dataset:
    root: Path
    config: dict
    init: Scene
    observations: dict[int, Observation]
    depths: dict[int, object]

    @property
    def holdout(self) -> list[int]:
        return holdout_frames(self.config)

    @property
    def train_frames(self) -> list[int]:
        held = set(self.holdout)
        return [f for f in sorted(self.observations) if f not in held]

    @property
    def sky_color(self) -> tuple[float, float, float]:
        return tuple(float(x) for x in self.config.get("sky_color", (0.6, 0.75, 0.95)))


def write_dataset(cfg: dict, out_dir) -> Path:
    """Ray-cast every frame of a scene description and write it with its splat initialization."""
    out = Path(out_dir)
    ps = scene_from_config(cfg)
    rig = ps.rig
    for f in range(rig.frame_count):
        cam = raycast_camera(ps, rig.camera_from_world(f), rig.intrinsics, f)
        ri = raycast_lidar(ps, rig.world_from_lidar(f), rig.lidar_spec, f)
        stem = frame_stem(out, f)
        write_png(stem.with_name(stem.name + "_color.png"), cam["color"])
        write_depth(stem.with_name(stem.name + "_depth.dep"), cam["depth"])
        for key in ("sky_mask", "fg_mask", "box_mask"):
            write_png(stem.with_name(f"{stem.name}_{key.split('_')[0]}.png"), cam[key])
        write_lri(stem.with_name(stem.name + ".lri"), ri)
    scene = init_splats(ps, float(cfg.get("density", 16.0)), seed=int(cfg.get("seed", 0)),
                        jitter=float(cfg.get("jitter", 0.0)))
    save_scene(out / INIT_NAME, scene)
    write_json(out / "scene.json", cfg)
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "scene.json").exists():
        raise DataError(f"{root} is not a dataset directory (no scene.json)")
    cfg = read_json(root / "scene.json")
    init = load_scene(root / INIT_NAME)
    obs, depths = {}, {}
    for f in range(init.frame_count):
        stem = frame_stem(root, f)
        try:
            color = read_png(stem.with_name(stem.name + "_color.png"))
            sky = read_mask(stem.with_name(stem.name + "_sky.png"))
            fg = read_mask(stem.with_name(stem.name + "_fg.png"))
            box = read_mask(stem.with_name(stem.name + "_box.png"))
            spec = init.rig.lidar_spec
            ri = read_lri(stem.with_name(stem.name + ".lri"), spec.min_range, spec.max_range, spec.cull_margin)
            depths[f] = read_depth(stem.with_name(stem.name + "_depth.dep"))
        except FileNotFoundError as e:
            raise DataError(f"dataset {root} is missing frame {f}: {e.filename}") from e
        if color.ndim != 3 or color.shape[2] != 3:
            raise DataError(f"frame {f} color image must be RGB")
        obs[f] = Observation(color, ri, sky, fg, box)
    return Dataset(root, cfg, init, obs, depths)
