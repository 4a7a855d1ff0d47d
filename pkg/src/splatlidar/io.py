"""File formats: splat PLY, LRI1 range images, DEP1 depth, PNG and JSON configs.

Binary formats are little-endian and start with a 4-byte magic whose last
character is the format version. Every writer goes through a temp file and
an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from .camera import CameraIntrinsics
from .core import DTYPE, SplatModel, num_sh_coeffs
from .lidar import LidarSpec, RangeImage
from .scene import Actor, ActorTrack, Scene, SensorRig
from .se3 import SE3Pose

LRI_MAGIC = b"LRI1"
DEP_MAGIC = b"DEP1"
FORMAT_VERSION = 1
INVALID_RANGE = -1.0
DEFAULT_LIDAR_VIS_LOGIT = 4.0
BACKGROUND_ACTOR = -1


class DataError(Exception):
    """Malformed or inconsistent input file."""


@contextmanager
def atomic_write(path, mode: str = "wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- splat PLY -----------------------------------------------------------------


def _ply_fields(sh_degree: int) -> list[str]:
    k = num_sh_coeffs(sh_degree)
    names = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity"]
    names += ["f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    return names + ["lidar_vis"]


def _model_columns(model: SplatModel) -> dict[str, np.ndarray]:
    m = model.detach()
    cols = {}
    for i, c in enumerate("xyz"):
        cols[c] = m.means[:, i].numpy()
    for i in range(4):
        cols[f"rot_{i}"] = m.quats[:, i].numpy()
    for i in range(3):
        cols[f"scale_{i}"] = m.log_scales[:, i].numpy()
    cols["opacity"] = m.opacity_logits.numpy()
    sh = m.sh.numpy()
    for c in range(3):
        cols[f"f_dc_{c}"] = sh[:, 0, c]
    # 3DGS layout: f_rest is channel-major, all coefficients of R then G then B
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(len(m), -1)
    for i in range(rest.shape[1]):
        cols[f"f_rest_{i}"] = rest[:, i]
    cols["lidar_vis"] = m.lidar_vis_logits.numpy()
    return cols


def write_splat_ply(path, model: SplatModel, actor_index=None) -> None:
    """Binary little-endian PLY storing every parameter as float64.

    ``actor_index`` optionally tags each row with an int32 actor slot.
    """
    cols = _model_columns(model)
    names = _ply_fields(model.sh_degree)
    dtype = [(n, "<f8") for n in names]
    if actor_index is not None:
        dtype.append(("actor", "<i4"))
    rows = np.empty(len(model), dtype=dtype)
    for n in names:
        rows[n] = cols[n]
    if actor_index is not None:
        rows["actor"] = np.asarray(actor_index, dtype=np.int32)
    el = PlyElement.describe(rows, "vertex")
    with atomic_write(path) as fh:
        PlyData([el], text=False, byte_order="<").write(fh)


def read_splat_ply(path) -> tuple[SplatModel, np.ndarray | None]:
    """Load a splat PLY; returns (model, actor column or None).

    Files without ``lidar_vis`` (plain 3DGS exports) get logit +4.
    """
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except (OSError, ValueError, KeyError, struct.error, PlyParseError) as e:
        raise DataError(f"cannot read splat file {path}: {e}") from e
    names = v.dtype.names
    need = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity",
            "f_dc_0", "f_dc_1", "f_dc_2"]
    missing = [n for n in need if n not in names]
    if missing:
        raise DataError(f"splat file {path} lacks properties {missing}")
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    if n_rest % 3:
        raise DataError(f"f_rest count {n_rest} is not a multiple of 3")
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if num_sh_coeffs(degree) != k:
        raise DataError(f"{k} SH coefficients per channel is not a full degree")
    N = len(v)

    def col(name):
        return np.asarray(v[name], dtype=np.float64)

    sh = np.zeros((N, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    if n_rest:
        rest = np.stack([col(f"f_rest_{i}") for i in range(n_rest)], -1)
        sh[:, 1:, :] = rest.reshape(N, 3, k - 1).transpose(0, 2, 1)
    vis = col("lidar_vis") if "lidar_vis" in names else np.full(N, DEFAULT_LIDAR_VIS_LOGIT)
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)  # noqa: E731
    model = SplatModel(
        means=t(np.stack([col(c) for c in "xyz"], -1).reshape(N, 3)),
        quats=t(np.stack([col(f"rot_{i}") for i in range(4)], -1).reshape(N, 4)),
        log_scales=t(np.stack([col(f"scale_{i}") for i in range(3)], -1).reshape(N, 3)),
        opacity_logits=t(col("opacity")),
        sh=t(sh),
        lidar_vis_logits=t(vis),
        sh_degree=degree,
    )
    actor = np.asarray(v["actor"], dtype=np.int64) if "actor" in names else None
    return model, actor


# -- scene checkpoints ---------------------------------------------------------


def pose_to_json(p: SE3Pose) -> dict:
    return {"rotation": [float(x) for x in p.rotation], "translation": [float(x) for x in p.translation]}


def pose_from_json(d) -> SE3Pose:
    if isinstance(d, dict):
        return SE3Pose(d.get("rotation", [1.0, 0.0, 0.0, 0.0]), d.get("translation", [0.0, 0.0, 0.0]))
    a = np.asarray(d, dtype=np.float64)
    if a.shape == (4, 4):
        return SE3Pose.from_matrix(a)
    if a.shape == (3,):
        return SE3Pose.translation_only(a)
    raise DataError(f"cannot interpret pose {d!r}")


def intrinsics_to_json(K: CameraIntrinsics) -> dict:
    return {k: getattr(K, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "near", "far")}


def intrinsics_from_json(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(**d)


def lidar_spec_to_json(spec: LidarSpec) -> dict:
    return {
        "inclinations": [float(x) for x in spec.inclinations],
        "azimuth_bins": spec.azimuth_bins,
        "min_range": spec.min_range,
        "max_range": spec.max_range,
        "cull_margin": spec.cull_margin,
    }


def lidar_spec_from_json(d: dict) -> LidarSpec:
    if "inclinations" in d:
        return LidarSpec(np.asarray(d["inclinations"], dtype=np.float64), int(d["azimuth_bins"]),
                         float(d.get("min_range", 0.5)), float(d.get("max_range", 250.0)),
                         float(d.get("cull_margin", 1.0)))
    return LidarSpec.uniform(
        beams=int(d.get("beams", 32)), low_deg=float(d.get("low_deg", -15.0)), high_deg=float(d.get("high_deg", 15.0)),
        azimuth_bins=int(d.get("azimuth_bins", 900)), min_range=float(d.get("min_range", 0.5)),
        max_range=float(d.get("max_range", 250.0)), cull_margin=float(d.get("cull_margin", 1.0)),
    )


def rig_to_json(rig: SensorRig) -> dict:
    return {
        "camera": intrinsics_to_json(rig.intrinsics),
        "lidar": lidar_spec_to_json(rig.lidar_spec),
        "ego_poses": [pose_to_json(p) for p in rig.ego_poses],
        "ego_from_camera": pose_to_json(rig.ego_from_camera),
        "ego_from_lidar": pose_to_json(rig.ego_from_lidar),
    }


def rig_from_json(d: dict) -> SensorRig:
    return SensorRig(
        intrinsics_from_json(d["camera"]),
        lidar_spec_from_json(d["lidar"]),
        [pose_from_json(p) for p in d["ego_poses"]],
        pose_from_json(d["ego_from_camera"]),
        pose_from_json(d["ego_from_lidar"]),
    )


def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from e


def sidecar_path(ply_path) -> Path:
    p = Path(ply_path)
    return p.with_suffix(".poses.json")


def save_scene(path, scene: Scene) -> None:
    """Splat PLY (background plus actors, tagged by ``actor``) and a pose sidecar."""
    actors = scene.sorted_actors()
    models = [scene.background] + [a.model for a in actors]
    tags = [np.full(len(scene.background), BACKGROUND_ACTOR)] + [np.full(len(a.model), i) for i, a in enumerate(actors)]
    write_splat_ply(path, SplatModel.concat(models), np.concatenate(tags))
    write_json(sidecar_path(path), {
        "version": FORMAT_VERSION,
        "rig": rig_to_json(scene.rig),
        "actors": [
            {
                "id": a.track.actor_id,
                "box_size": [float(x) for x in a.track.box_size],
                "base_poses": {str(f): pose_to_json(p) for f, p in sorted(a.track.base_poses.items())},
                "camera_correction": a.track.camera_correction.detach().numpy().tolist(),
                "lidar_correction": a.track.lidar_correction.detach().numpy().tolist(),
            }
            for a in actors
        ],
    })


def load_scene(path) -> Scene:
    model, tags = read_splat_ply(path)
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing pose sidecar {side}")
    meta = read_json(side)
    try:
        rig = rig_from_json(meta["rig"])
        if tags is None:
            tags = np.full(len(model), BACKGROUND_ACTOR)
        actors = []
        for i, a in enumerate(meta["actors"]):
            track = ActorTrack(
                str(a["id"]),
                np.asarray(a["box_size"], dtype=np.float64),
                {int(f): pose_from_json(p) for f, p in a["base_poses"].items()},
                torch.as_tensor(np.asarray(a["camera_correction"], dtype=np.float64).reshape(-1, 6)),
                torch.as_tensor(np.asarray(a["lidar_correction"], dtype=np.float64).reshape(-1, 6)),
            )
            actors.append(Actor(track, model.select(torch.as_tensor(tags == i))))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad pose sidecar {side}: {e}") from e
    return Scene(model.select(torch.as_tensor(tags == BACKGROUND_ACTOR)), actors, rig)


# -- range images and depth ------------------------------------------------------


def _check_magic(buf: bytes, magic: bytes, path) -> tuple[int, int]:
    if len(buf) < 12 or buf[:4] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    return struct.unpack_from("<2I", buf, 4)


def _f32(x) -> np.ndarray:
    a = x.detach().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return np.ascontiguousarray(a, dtype="<f4")


def write_lri(path, ri: RangeImage, spec: LidarSpec | None = None) -> None:
    """LRI1: magic, u32 M, u32 W, M float64 inclinations, then float32 ranges (invalid -1), opacity, uncertainty."""
    spec = spec or ri.spec
    if spec is None:
        raise ValueError("range image needs a LiDAR spec to be written")
    M, W = spec.shape
    if ri.shape != (M, W):
        raise ValueError(f"range image {ri.shape} does not match spec {spec.shape}")
    valid = np.asarray(ri.valid, dtype=bool)
    ranges = np.where(valid, _f32(ri.ranges), np.float32(INVALID_RANGE)).astype("<f4")
    with atomic_write(path) as fh:
        fh.write(LRI_MAGIC + struct.pack("<2I", M, W))
        fh.write(np.asarray(spec.inclinations, dtype="<f8").tobytes())
        fh.write(ranges.tobytes())
        fh.write(_f32(ri.opacity).tobytes())
        fh.write(_f32(ri.uncertainty).tobytes())


def read_lri(path, min_range: float = 0.5, max_range: float = 250.0, cull_margin: float = 1.0) -> RangeImage:
    """Read an LRI1 file; the range limits and cull margin are not stored and default to the usual spec."""
    buf = Path(path).read_bytes()
    M, W = _check_magic(buf, LRI_MAGIC, path)
    expect = 12 + 8 * M + 3 * 4 * M * W
    if len(buf) != expect:
        raise DataError(f"{path}: expected {expect} bytes, found {len(buf)}")
    inc = np.frombuffer(buf, dtype="<f8", count=M, offset=12).copy()
    planes = np.frombuffer(buf, dtype="<f4", offset=12 + 8 * M).reshape(3, M, W).astype(np.float64)
    try:
        spec = LidarSpec(inc, W, min_range, max_range, cull_margin)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    valid = planes[0] != INVALID_RANGE
    return RangeImage.from_numpy(np.where(valid, planes[0], 0.0), valid, planes[1], planes[2], spec)


def write_depth(path, depth) -> None:
    """DEP1: magic, u32 H, u32 W, then float32 z-depth, row-major."""
    d = _f32(depth)
    if d.ndim != 2:
        raise ValueError("depth must be [H, W]")
    with atomic_write(path) as fh:
        fh.write(DEP_MAGIC + struct.pack("<2I", *d.shape))
        fh.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    H, W = _check_magic(buf, DEP_MAGIC, path)
    if len(buf) != 12 + 4 * H * W:
        raise DataError(f"{path}: truncated depth file")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(H, W).astype(np.float64)


def write_png(path, image) -> None:
    """8-bit PNG of a [0, 1] float image ([H, W] or [H, W, 3]) or a boolean mask."""
    a = np.asarray(image.detach() if isinstance(image, torch.Tensor) else image)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    else:
        a = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    with atomic_write(path) as fh:
        Image.fromarray(a).save(fh, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def read_mask(path) -> np.ndarray:
    return read_png(path) > 0.5
