"""Joint camera + LiDAR optimization of a dynamic splat scene."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .camera import pseudo_depth_target, rasterize_camera
from .core import DTYPE, SplatModel
from .lidar import RangeImage, range_to_pointcloud, rasterize_lidar
from .losses import FrameRenders, FrameTargets, LossWeights, total_loss
from .scene import Actor, ActorTrack, Scene, compose_actors, compose_scene, copy_scene
from .raster import DEFAULT_EARLY_STOP

log = logging.getLogger(__name__)

TRAIN_CUTOFF = 1.0 / 255.0
LR_KEYS = ("means", "quats", "log_scales", "opacity_logits", "sh", "lidar_vis_logits", "pose")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: dict[str, float] = field(default_factory=lambda: {
        "means": 3e-3,
        "quats": 1e-3,
        "log_scales": 2e-2,
        "opacity_logits": 5e-2,
        "sh": 2.5e-3,
        "lidar_vis_logits": 5e-2,
        "pose": 5e-2,
    })
    prune_interval: int = 100
    prune_opacity_threshold: float = 0.005
    deterministic: bool = True
    seed: int = 0
    decoupled: bool = True
    optimize_gaussians: bool = True
    optimize_poses: bool = True
    frames: list[int] | None = None
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    early_stop: float = DEFAULT_EARLY_STOP
    # training ignores contributions below the usual 8-bit visibility threshold
    cutoff: float = TRAIN_CUTOFF
    compensate: bool = True
    log_every: int = 50
    adam_eps: float = 1e-15

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.prune_interval < 0:
            raise ValueError("prune_interval must be nonnegative")
        unknown = set(self.lr) - set(LR_KEYS)
        if unknown:
            raise ValueError(f"unknown learning-rate groups {sorted(unknown)}")
        defaults = TrainConfig.__dataclass_fields__["lr"].default_factory()
        self.lr = {**defaults, **self.lr}
        for k, v in self.lr.items():
            if v < 0:
                raise ValueError(f"learning rate {k} must be nonnegative")


@dataclass
class Observation:
    """Per-frame supervision; masks are [H, W] booleans."""

    color: np.ndarray
    ranges: RangeImage
    sky_mask: np.ndarray | None = None
    fg_mask: np.ndarray | None = None
    box_mask: np.ndarray | None = None
    pseudo_depth: np.ndarray | None = None
    pseudo_valid: np.ndarray | None = None

    def targets(self) -> FrameTargets:
        def mask(m):
            return None if m is None else torch.as_tensor(np.asarray(m, dtype=bool))

        return FrameTargets(
            color=torch.as_tensor(np.asarray(self.color, dtype=np.float64)),
            ranges=self.ranges,
            sky_mask=mask(self.sky_mask),
            fg_mask=mask(self.fg_mask),
            box_mask=mask(self.box_mask),
            pseudo_depth=None if self.pseudo_depth is None else torch.as_tensor(self.pseudo_depth, dtype=DTYPE),
            pseudo_valid=mask(self.pseudo_valid),
        )


def with_pseudo_depth(obs: Observation, scene: Scene, frame: int) -> Observation:
    """Fill the sparse camera depth target by projecting GT LiDAR returns."""
    rig = scene.rig
    pts = range_to_pointcloud(obs.ranges, rig.lidar_spec, math.inf)
    depth, valid = pseudo_depth_target(rig.world_from_lidar(frame).apply(pts), rig.camera_from_world(frame), rig.intrinsics)
    obs.pseudo_depth, obs.pseudo_valid = depth, valid
    return obs


class _Params:
    """Leaf tensors of every optimizable model plus the optimizer over them."""

    def __init__(self, scene: Scene, config: TrainConfig):
        self.scene = copy_scene(scene)
        self.config = config
        self.models: list[SplatModel] = [self.scene.background] + [a.model for a in self.scene.actors]
        groups = []
        for slot, m in enumerate(self.models):
            leaves = {}
            for name in SplatModel.PARAMS:
                t = getattr(m, name).detach().clone().requires_grad_(config.optimize_gaussians)
                leaves[name] = t
                if config.optimize_gaussians:
                    groups.append({"params": [t], "lr": config.lr[name], "slot": slot, "name": name})
            self.models[slot] = m.replace(**leaves)
        # one leaf per frame: Adam skips leaves without a gradient, so a frame's
        # correction only moves (and only advances its moments) when that frame is rendered
        self.pose_leaves: list[tuple[ActorTrack, str, list[Tensor]]] = []
        for a in self.scene.actors:
            for attr in ("camera_correction", "lidar_correction"):
                used = attr == "camera_correction" or config.decoupled
                t = getattr(a.track, attr).detach().clone()
                setattr(a.track, attr, t)
                if config.optimize_poses and used and len(t):
                    leaves = [row.clone().requires_grad_(True) for row in t]
                    self.pose_leaves.append((a.track, attr, leaves))
                    groups.append({"params": leaves, "lr": config.lr["pose"], "slot": -1, "name": attr})
        self._sync()
        self.bind_frame(None)
        self.optimizer = torch.optim.Adam(groups, eps=config.adam_eps) if groups else None

    def bind_frame(self, frame: int | None):
        """Rebuild the correction tables so that only ``frame``'s rows carry gradients."""
        for track, attr, leaves in self.pose_leaves:
            setattr(track, attr, torch.stack([x if i == frame else x.detach() for i, x in enumerate(leaves)]))

    def _sync(self):
        self.scene.background = self.models[0]
        for a, m in zip(self.scene.actors, self.models[1:]):
            a.model = m

    def renormalize_quats(self):
        with torch.no_grad():
            for m in self.models:
                if len(m):
                    # rows already unit to roundoff are left alone: a one-ulp change is enough
                    # for Adam to turn roundoff gradients into full-size steps
                    n = m.quats.norm(dim=-1, keepdim=True)
                    m.quats.copy_(torch.where((n - 1.0).abs() > 1e-12, m.quats / n, m.quats))

    def prune(self, threshold: float) -> int:
        removed = 0
        for slot, m in enumerate(self.models):
            if not len(m):
                continue
            keep = torch.sigmoid(m.opacity_logits.detach()) >= threshold
            if bool(keep.all()):
                continue
            removed += int((~keep).sum())
            leaves = {}
            for name in SplatModel.PARAMS:
                old = getattr(m, name)
                new = old.detach()[keep].clone().requires_grad_(old.requires_grad)
                leaves[name] = new
                if self.optimizer is not None:
                    self._swap_param(old, new, keep)
            self.models[slot] = m.replace(**leaves)
        self._sync()
        return removed

    def _swap_param(self, old, new, keep):
        for g in self.optimizer.param_groups:
            if g["params"] and g["params"][0] is old:
                g["params"] = [new]
                state = self.optimizer.state.pop(old, None)
                if state:
                    self.optimizer.state[new] = {
                        k: (v[keep].clone() if torch.is_tensor(v) and v.dim() > 0 else v) for k, v in state.items()
                    }

    def result(self, trained_frames) -> Scene:
        self.bind_frame(None)
        out = copy_scene(self.scene)
        fill_untrained_corrections(out, trained_frames)
        return out


def fill_untrained_corrections(scene: Scene, trained_frames) -> None:
    """Linearly interpolate actor corrections into frames that got no supervision.

    Corrections and actor geometry can trade a common offset, so leaving an
    unseen frame at zero puts the actor somewhere the model never saw it.
    """
    known = np.array(sorted(set(trained_frames)), dtype=np.float64)
    if not len(known):
        return
    for a in scene.actors:
        for attr in ("camera_correction", "lidar_correction"):
            c = getattr(a.track, attr).detach().numpy()
            F = c.shape[0]
            idx = known[known < F].astype(int)
            if not len(idx) or len(idx) == F:
                continue
            frames = np.arange(F, dtype=np.float64)
            filled = np.stack([np.interp(frames, idx, c[idx, j]) for j in range(c.shape[1])], -1)
            filled[idx] = c[idx]
            setattr(a.track, attr, torch.as_tensor(filled, dtype=DTYPE))


def render_frame(scene: Scene, frame: int, config: TrainConfig, need_actor_opacity: bool = True) -> FrameRenders:
    rig = scene.rig
    bg = torch.as_tensor(config.background, dtype=DTYPE)
    cam_model = compose_scene(scene, frame, "camera", config.decoupled)
    cam = rasterize_camera(cam_model, rig.camera_from_world(frame), rig.intrinsics, background=bg,
                           early_stop=config.early_stop, cutoff=config.cutoff)
    actor_opacity = None
    if need_actor_opacity:
        actors = compose_actors(scene, frame, "camera", config.decoupled)
        if actors is not None:
            actor_opacity = rasterize_camera(actors, rig.camera_from_world(frame), rig.intrinsics,
                                             early_stop=config.early_stop, cutoff=config.cutoff).opacity
    lidar_model = compose_scene(scene, frame, "lidar", config.decoupled)
    lidar = rasterize_lidar(lidar_model, rig.world_from_lidar(frame), rig.lidar_spec,
                            compensate=config.compensate, early_stop=config.early_stop, cutoff=config.cutoff)
    models = [scene.background] + [a.model for a in scene.actors if len(a.model)]
    return FrameRenders(
        cam, lidar, actor_opacity, SplatModel.concat(models),
        _frame_corrections(scene, frame, "camera_correction"),
        _frame_corrections(scene, frame, "lidar_correction") if config.decoupled else None,
    )


def _frame_corrections(scene: Scene, frame: int, attr: str):
    """This frame's correction twists for every active actor, for the pose prior."""
    rows = [getattr(a.track, attr)[frame] for a in scene.sorted_actors() if a.track.active(frame)]
    return torch.stack(rows) if rows else None


def _frame_order(config: TrainConfig, frames: list[int]):
    if config.deterministic:
        i = 0
        while True:
            yield frames[i % len(frames)]
            i += 1
    rng = np.random.default_rng(config.seed)
    while True:
        yield frames[int(rng.integers(len(frames)))]


def fit(
    scene: Scene,
    observations: dict[int, Observation] | list[Observation],
    config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    history: list[dict[str, float]] | None = None,
) -> Scene:
    """Optimize Gaussians and per-frame actor pose corrections.

    ``observations`` maps frame index to supervision (a list is indexed by
    frame). Returns a new scene; the input is left untouched. Per-iteration
    loss terms are appended to ``history`` when given.
    """
    config = config or TrainConfig()
    weights = weights or LossWeights()
    if not isinstance(observations, dict):
        observations = dict(enumerate(observations))
    frames = sorted(observations) if config.frames is None else list(config.frames)
    if not frames:
        raise ValueError("no training frames")
    missing = [f for f in frames if f not in observations]
    if missing:
        raise ValueError(f"no observation for frames {missing}")
    torch.manual_seed(config.seed)
    params = _Params(scene, config)
    targets = {f: observations[f].targets() for f in frames}
    need_actor_opacity = weights.camera_opacity > 0 and any(len(a.model) for a in params.scene.actors)
    order = _frame_order(config, frames)
    for it in range(1, config.iterations + 1):
        f = next(order)
        params.bind_frame(f)
        renders = render_frame(params.scene, f, config, need_actor_opacity)
        loss, terms = total_loss(renders, targets[f], weights)
        for name, v in terms.items():
            if not torch.isfinite(v):
                raise FloatingPointError(f"non-finite loss term {name!r} at iteration {it} (frame {f})")
        if params.optimizer is not None:
            params.optimizer.zero_grad(set_to_none=True)
            if loss.requires_grad:
                loss.backward()
            params.optimizer.step()
        params.renormalize_quats()
        pruned = 0
        if config.prune_interval and it % config.prune_interval == 0 and config.optimize_gaussians:
            pruned = params.prune(config.prune_opacity_threshold)
        if history is not None:
            history.append({"iteration": it, "frame": f, **{k: float(v.detach()) for k, v in terms.items()}})
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d frame %d loss %.6f pruned %d", it, f, float(loss.detach()), pruned)
    return params.result(frames)
