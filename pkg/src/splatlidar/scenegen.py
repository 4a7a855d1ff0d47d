"""Analytic primitive scenes with exact ray-cast camera and LiDAR observations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import CameraIntrinsics
from .core import DTYPE, SplatModel, rgb_to_sh_dc
from .io import intrinsics_from_json, lidar_spec_from_json, pose_from_json
from .lidar import LidarSpec, RangeImage
from .scene import Actor, ActorTrack, Scene, SensorRig
from .se3 import SE3Pose

NO_HIT = -2
BACKGROUND = -1

# camera axes (x right, y down, z forward) expressed in the ego frame (x forward, y left, z up)
EGO_FROM_CAMERA_R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_mount(translation=(0.0, 0.0, 0.0)) -> SE3Pose:
    T = np.eye(4)
    T[:3, :3] = EGO_FROM_CAMERA_R
    T[:3, 3] = translation
    return SE3Pose.from_matrix(T)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    actor: str | None = None
    density: float | None = None  # overrides the global sampling density

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, o, d):
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        p = o + t[:, None] * d
        n = (p - self.center) / self.radius
        return t, n

    @property
    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def sample(self, density, rng):
        n = max(1, int(round(self.area * density)))
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        phi = i * math.pi * (3.0 - math.sqrt(5.0)) + rng.uniform(0, 2 * math.pi)
        rho = np.sqrt(1.0 - z * z)
        nrm = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], -1)
        return self.center + self.radius * nrm, nrm


@dataclass
class Plane:
    """Finite two-sided rectangle centred at ``center`` with half extents along two in-plane axes."""

    center: np.ndarray
    normal: np.ndarray
    half_size: tuple[float, float]
    albedo: np.ndarray
    actor: str | None = None
    axis_u: np.ndarray | None = None
    density: float | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if min(self.half_size) <= 0:
            raise ValueError("plane extents must be positive")
        if self.axis_u is None:
            helper = np.array([1.0, 0.0, 0.0]) if abs(self.normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            self.axis_u = helper - self.normal * (helper @ self.normal)
        self.axis_u = np.asarray(self.axis_u, dtype=np.float64)
        self.axis_u = self.axis_u / np.linalg.norm(self.axis_u)
        self.axis_v = np.cross(self.normal, self.axis_u)

    def intersect(self, o, d):
        den = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.normal) / den
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        rel = p - self.center
        inside = (np.abs(rel @ self.axis_u) <= self.half_size[0]) & (np.abs(rel @ self.axis_v) <= self.half_size[1])
        t = np.where(np.isfinite(t) & (t > 1e-9) & inside, t, np.inf)
        n = np.where((den < 0)[:, None], self.normal, -self.normal)
        return t, np.broadcast_to(n, o.shape).copy()

    @property
    def area(self) -> float:
        return 4.0 * self.half_size[0] * self.half_size[1]

    def sample(self, density, rng):
        s = 1.0 / math.sqrt(density)
        nu = max(1, int(round(2 * self.half_size[0] / s)))
        nv = max(1, int(round(2 * self.half_size[1] / s)))
        a = (np.arange(nu) + 0.5) / nu * 2 - 1
        b = (np.arange(nv) + 0.5) / nv * 2 - 1
        A, B = np.meshgrid(a * self.half_size[0], b * self.half_size[1], indexing="ij")
        p = self.center + A.reshape(-1, 1) * self.axis_u + B.reshape(-1, 1) * self.axis_v
        return p, np.broadcast_to(self.normal, p.shape).copy()


@dataclass
class Box:
    """Axis-aligned box (in its own frame) with full edge lengths ``size``."""

    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray
    actor: str | None = None
    density: float | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if np.any(self.size <= 0):
            raise ValueError("box size must be positive")

    def intersect(self, o, d):
        lo = self.center - self.size / 2
        hi = self.center + self.size / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        hit = (t_far >= t_near) & (t_far > 1e-9)
        outside = t_near > 1e-9
        t = np.where(hit, np.where(outside, t_near, t_far), np.inf)
        axis = np.where(outside, tmin.argmax(axis=1), tmax.argmin(axis=1))
        rows = np.arange(len(o))
        n = np.zeros_like(o)
        n[rows, axis] = -np.sign(d[rows, axis])
        return t, n

    @property
    def area(self) -> float:
        x, y, z = self.size
        return 2 * (x * y + y * z + x * z)

    def sample(self, density, rng):
        pts, nrms = [], []
        for ax in range(3):
            u, v = [a for a in range(3) if a != ax]
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[ax] = sign
                axis_u = np.zeros(3)
                axis_u[u] = 1.0
                face = Plane(
                    self.center + n * self.size[ax] / 2, n, (self.size[u] / 2, self.size[v] / 2), self.albedo,
                    axis_u=axis_u,
                )
                p, nn = face.sample(density, rng)
                pts.append(p)
                nrms.append(nn)
        return np.concatenate(pts), np.concatenate(nrms)


@dataclass
class ActorSpec:
    box_size: np.ndarray
    poses: dict[int, SE3Pose]


@dataclass
class PrimitiveScene:
    primitives: list
    actors: dict[str, ActorSpec]
    rig: SensorRig
    sky_color: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.75, 0.95]))
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.4, 0.866]))
    ambient: float = 0.3
    # LiDAR observations may see actors displaced from their annotated pose
    lidar_offsets: dict[str, SE3Pose] = field(default_factory=dict)
    camera_supersample: int = 1

    def __post_init__(self):
        if self.camera_supersample < 1:
            raise ValueError("camera_supersample must be at least 1")
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)
        self.sky_color = np.asarray(self.sky_color, dtype=np.float64)

    def shade(self, albedo, normals):
        lam = np.clip(normals @ self.light_dir, 0.0, None)
        return albedo * (self.ambient + (1.0 - self.ambient) * lam)[..., None]

    def actor_pose(self, actor: str, frame: int, sensor: str = "camera") -> SE3Pose | None:
        pose = self.actors[actor].poses.get(frame)
        if pose is not None and sensor == "lidar" and actor in self.lidar_offsets:
            pose = pose @ self.lidar_offsets[actor]
        return pose


@dataclass
class Hits:
    t: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    owner: np.ndarray  # NO_HIT, BACKGROUND or actor index (sorted ids)


def raycast(ps: PrimitiveScene, origins, dirs, frame: int, sensor: str = "camera") -> Hits:
    """Nearest analytic hit for world-space rays."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    P = len(d)
    best = np.full(P, np.inf)
    normal = np.zeros((P, 3))
    albedo = np.zeros((P, 3))
    owner = np.full(P, NO_HIT)
    ids = sorted(ps.actors)
    for prim in ps.primitives:
        if prim.actor is None:
            oo, dd, R = o, d, None
            tag = BACKGROUND
        else:
            pose = ps.actor_pose(prim.actor, frame, sensor)
            if pose is None:
                continue
            inv = pose.inverse()
            oo, dd, R = inv.apply(o), d @ inv.R.T, pose.R
            tag = ids.index(prim.actor)
        t, n = prim.intersect(oo, dd)
        closer = t < best
        if R is not None:
            n = n @ R.T
        best = np.where(closer, t, best)
        normal[closer] = n[closer]
        albedo[closer] = prim.albedo
        owner[closer] = tag
    return Hits(best, normal, albedo, owner)


def pixel_rays(K: CameraIntrinsics, world_from_camera: SE3Pose, offset=(0.5, 0.5)):
    """Rays through ``(col + offset[0], row + offset[1])`` of every pixel."""
    j, i = np.meshgrid(np.arange(K.width) + offset[0], np.arange(K.height) + offset[1])
    d_cam = np.stack([(j - K.cx) / K.fx, (i - K.cy) / K.fy, np.ones_like(j)], -1).reshape(-1, 3)
    norm = np.linalg.norm(d_cam, axis=1)
    d = (d_cam / norm[:, None]) @ world_from_camera.R.T
    o = np.broadcast_to(world_from_camera.translation, d.shape)
    return o, d, 1.0 / norm


def raycast_camera(ps: PrimitiveScene, W: SE3Pose, K: CameraIntrinsics, frame: int) -> dict[str, np.ndarray]:
    """Camera observation through camera-from-world ``W``.

    Color is the box-filtered mean of ``ps.camera_supersample``^2 stratified
    rays per pixel. Depth (0 for sky) and the actor box mask come from the
    pixel-center ray. A pixel is sky when no sub-ray hits and foreground when
    every sub-ray hits, so partly covered edge pixels are in neither mask.
    """
    n = ps.camera_supersample
    shape = (K.height, K.width)
    color = np.zeros((K.height * K.width, 3))
    hits_any = np.zeros(K.height * K.width, dtype=bool)
    hits_all = np.ones(K.height * K.width, dtype=bool)
    for a in range(n):
        for b in range(n):
            o, d, _ = pixel_rays(K, W.inverse(), ((b + 0.5) / n, (a + 0.5) / n))
            hits = raycast(ps, o, d, frame, "camera")
            hit = np.isfinite(hits.t)
            color += np.where(hit[:, None], ps.shade(hits.albedo, hits.normal), ps.sky_color)
            hits_any |= hit
            hits_all &= hit
    color /= n * n
    o, d, cos_axis = pixel_rays(K, W.inverse())
    center = raycast(ps, o, d, frame, "camera").t
    depth = np.where(np.isfinite(center), center * cos_axis, 0.0)
    box = np.zeros(len(d), dtype=bool)
    for aid, spec in ps.actors.items():
        pose = ps.actor_pose(aid, frame, "camera")
        if pose is None:
            continue
        inv = pose.inverse()
        t, _ = Box(np.zeros(3), spec.box_size, np.zeros(3)).intersect(inv.apply(o), d @ inv.R.T)
        box |= np.isfinite(t)
    return {
        "color": color.reshape(shape + (3,)),
        "depth": depth.reshape(shape),
        "fg_mask": hits_all.reshape(shape),
        "sky_mask": ~hits_any.reshape(shape),
        "box_mask": box.reshape(shape),
    }


def raycast_lidar(ps: PrimitiveScene, lidar_pose: SE3Pose, spec: LidarSpec, frame: int) -> RangeImage:
    """Ground-truth range image through world-from-lidar ``lidar_pose``."""
    d = spec.ray_directions().reshape(-1, 3) @ lidar_pose.R.T
    o = np.broadcast_to(lidar_pose.translation, d.shape)
    t = raycast(ps, o, d, frame, "lidar").t.reshape(spec.shape)
    valid = np.isfinite(t) & (t >= spec.min_range) & (t <= spec.max_range)
    return RangeImage.from_numpy(np.where(valid, t, 0.0), valid, spec=spec)


def init_splats(
    ps: PrimitiveScene,
    density: float,
    *,
    seed: int = 0,
    jitter: float = 0.0,
    scale_factor: float = 1.0,
    opacity_logit: float = 2.0,
    lidar_vis_logit: float = 2.0,
    sh_degree: int = 0,
) -> Scene:
    """One isotropic splat per surface sample, actors in their object frames.

    Splat scale is ``scale_factor`` times the sample spacing; ``jitter`` adds
    Gaussian position noise (meters) to mimic noisy LiDAR initialization.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    if not ps.primitives:
        raise ValueError("scene has no primitives to sample")
    rng = np.random.default_rng(seed)
    groups: dict[str | None, list] = {}
    for prim in ps.primitives:
        rho = prim.density or density
        p, n = prim.sample(rho, rng)
        if jitter:
            p = p + rng.normal(scale=jitter, size=p.shape)
        color = ps.shade(prim.albedo, n)
        groups.setdefault(prim.actor, []).append((p, color, np.full(len(p), 1.0 / math.sqrt(rho))))

    def model(parts) -> SplatModel:
        if not parts:
            return _empty(sh_degree)
        p = np.concatenate([x[0] for x in parts])
        c = np.concatenate([x[1] for x in parts])
        spacing = np.concatenate([x[2] for x in parts])
        N = len(p)
        sh = torch.zeros(N, (sh_degree + 1) ** 2, 3, dtype=DTYPE)
        sh[:, 0] = torch.as_tensor(rgb_to_sh_dc(c))
        return SplatModel(
            means=torch.as_tensor(p, dtype=DTYPE),
            quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=DTYPE).repeat(N, 1),
            log_scales=torch.as_tensor(np.log(spacing * scale_factor), dtype=DTYPE)[:, None].repeat(1, 3),
            opacity_logits=torch.full((N,), float(opacity_logit), dtype=DTYPE),
            sh=sh,
            lidar_vis_logits=torch.full((N,), float(lidar_vis_logit), dtype=DTYPE),
            sh_degree=sh_degree,
        )

    actors = []
    for aid in sorted(ps.actors):
        spec = ps.actors[aid]
        track = ActorTrack.create(aid, spec.box_size, spec.poses, ps.rig.frame_count)
        actors.append(Actor(track, model(groups.get(aid, []))))
    return Scene(model(groups.get(None, [])), actors, ps.rig)


def _empty(sh_degree: int) -> SplatModel:
    k = (sh_degree + 1) ** 2
    return SplatModel(sh=torch.zeros(0, k, 3, dtype=DTYPE), sh_degree=sh_degree)


@dataclass
class FrameObservation:
    color: np.ndarray
    depth: np.ndarray
    sky_mask: np.ndarray
    fg_mask: np.ndarray
    box_mask: np.ndarray
    ranges: RangeImage


def observe(ps: PrimitiveScene, frames=None) -> list[FrameObservation]:
    rig = ps.rig
    out = []
    for f in range(rig.frame_count) if frames is None else frames:
        cam = raycast_camera(ps, rig.camera_from_world(f), rig.intrinsics, f)
        ri = raycast_lidar(ps, rig.world_from_lidar(f), rig.lidar_spec, f)
        out.append(FrameObservation(cam["color"], cam["depth"], cam["sky_mask"], cam["fg_mask"], cam["box_mask"], ri))
    return out


def _linear_poses(spec: dict, frames: int) -> dict[int, SE3Pose]:
    start = np.asarray(spec.get("start", [0.0, 0.0, 0.0]), dtype=np.float64)
    vel = np.asarray(spec.get("velocity", [0.0, 0.0, 0.0]), dtype=np.float64)
    first, last = spec.get("frames", [0, frames - 1])
    return {f: SE3Pose.translation_only(start + vel * f) for f in range(first, last + 1)}


def _poses(spec: dict, frames: int) -> dict[int, SE3Pose]:
    if "poses" in spec:
        return {int(f): pose_from_json(p) for f, p in spec["poses"].items()}
    return _linear_poses(spec, frames)


PRIMITIVES = {"sphere": Sphere, "plane": Plane, "box": Box}


def primitive_from_config(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive type {kind!r}")
    if kind == "plane":
        d["half_size"] = tuple(d["half_size"])
    return PRIMITIVES[kind](**d)


def scene_from_config(cfg: dict) -> PrimitiveScene:
    """Build a primitive scene from its JSON description (see ``desk_scene_config``)."""
    frames = int(cfg["frames"])
    if frames <= 0:
        raise ValueError("frames must be positive")
    K = intrinsics_from_json(cfg["camera"])
    spec = lidar_spec_from_json(cfg.get("lidar", {}))
    if "ego_poses" in cfg:
        ego = [pose_from_json(p) for p in cfg["ego_poses"]]
        if len(ego) != frames:
            raise ValueError("ego_poses length differs from frames")
    else:
        moves = _linear_poses(cfg.get("ego", {}), frames)
        ego = [moves[f] for f in range(frames)]
    rig = SensorRig(
        K, spec, ego,
        camera_mount(cfg.get("camera_mount", [0.0, 0.0, 0.0])),
        pose_from_json(cfg.get("lidar_mount", [0.0, 0.0, 0.0])),
    )
    prims = [primitive_from_config(p) for p in cfg.get("primitives", [])]
    actors = {
        str(aid): ActorSpec(np.asarray(a["box_size"], dtype=np.float64), _poses(a, frames))
        for aid, a in cfg.get("actors", {}).items()
    }
    for p in prims:
        if p.actor is not None and p.actor not in actors:
            raise ValueError(f"primitive references unknown actor {p.actor!r}")
    kw = {k: cfg[k] for k in ("sky_color", "light_dir", "ambient", "camera_supersample") if k in cfg}
    offsets = {str(a): pose_from_json(p) for a, p in cfg.get("lidar_offsets", {}).items()}
    return PrimitiveScene(prims, actors, rig, lidar_offsets=offsets, **kw)


def desk_scene_config(frames: int = 20) -> dict:
    """Three spheres on a ground plane and a box actor driving alongside the ego vehicle."""
    return {
        "frames": frames,
        "camera": {"fx": 70.0, "fy": 70.0, "cx": 48.0, "cy": 32.0, "width": 96, "height": 64},
        "lidar": {"beams": 32, "low_deg": -15.0, "high_deg": 15.0, "azimuth_bins": 900,
                  "min_range": 0.5, "max_range": 15.0, "cull_margin": 3.0},
        "ego": {"start": [0.0, 0.0, 0.0], "velocity": [0.4, 0.0, 0.0]},
        "camera_mount": [0.0, 0.0, 1.6],
        "lidar_mount": [0.0, 0.0, 1.8],
        "sky_color": [0.6, 0.75, 0.95],
        "light_dir": [0.3, 0.4, 0.866],
        "ambient": 0.3,
        "primitives": [
            # the ground reaches past LiDAR range from every ego position, so its edge never returns
            {"type": "plane", "center": [4.0, 0.0, 0.0], "normal": [0.0, 0.0, 1.0], "half_size": [20.0, 17.0],
             "albedo": [0.45, 0.5, 0.4], "density": 8.0},
            {"type": "sphere", "center": [9.0, 3.0, 1.0], "radius": 1.0, "albedo": [0.85, 0.25, 0.2]},
            {"type": "sphere", "center": [12.0, -3.5, 1.5], "radius": 1.5, "albedo": [0.2, 0.4, 0.85]},
            {"type": "sphere", "center": [7.0, -1.5, 0.6], "radius": 0.6, "albedo": [0.9, 0.8, 0.2]},
            {"type": "box", "center": [0.0, 0.0, 0.0], "size": [3.6, 1.8, 1.4], "albedo": [0.7, 0.7, 0.75],
             "actor": "car"},
        ],
        "actors": {"car": {"box_size": [3.8, 2.0, 1.6], "start": [6.0, 3.0, 0.7], "velocity": [0.6, 0.0, 0.0]}},
        "camera_supersample": 4,
        "density": 16.0,
        "holdout_every": 5,
        "holdout_offset": 2,
    }


def desk_scene(frames: int = 20) -> PrimitiveScene:
    return scene_from_config(desk_scene_config(frames))


def holdout_frames(cfg: dict) -> list[int]:
    every = int(cfg.get("holdout_every", 0))
    if every <= 0:
        return []
    return [f for f in range(int(cfg["frames"])) if f % every == int(cfg.get("holdout_offset", 0)) % every]
