"""Dynamic scene graph: static background plus rigid actors posed per frame.

Each actor carries two sets of learnable per-frame corrections, one used
when composing for the camera and one for the LiDAR, so the two sensors
may disagree about where a fast-moving actor is.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
from torch import Tensor

from .camera import CameraIntrinsics
from .core import DTYPE, SplatModel, quat_multiply, quat_normalize, quat_to_rotmat
from .lidar import LidarSpec
from .se3 import SE3Pose, compose_with_twist

Sensor = Literal["camera", "lidar"]

# object/ego frame convention: x forward, y left, z up
LATERAL_AXIS = np.array([0.0, 1.0, 0.0])
FORWARD_AXIS = np.array([1.0, 0.0, 0.0])
VERTICAL_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass
class SensorRig:
    """Per-frame ego poses and fixed camera/LiDAR mounting."""

    intrinsics: CameraIntrinsics
    lidar_spec: LidarSpec
    ego_poses: list[SE3Pose]
    ego_from_camera: SE3Pose = field(default_factory=SE3Pose.identity)
    ego_from_lidar: SE3Pose = field(default_factory=SE3Pose.identity)

    @property
    def frame_count(self) -> int:
        return len(self.ego_poses)

    def world_from_camera(self, frame: int) -> SE3Pose:
        return self.ego_poses[frame] @ self.ego_from_camera

    def camera_from_world(self, frame: int) -> SE3Pose:
        return self.world_from_camera(frame).inverse()

    def world_from_lidar(self, frame: int) -> SE3Pose:
        return self.ego_poses[frame] @ self.ego_from_lidar


@dataclass
class ActorTrack:
    actor_id: str
    box_size: np.ndarray
    base_poses: dict[int, SE3Pose]
    camera_correction: Tensor  # [F, 6] twists (rotvec, translation)
    lidar_correction: Tensor

    @classmethod
    def create(cls, actor_id: str, box_size, base_poses: dict[int, SE3Pose], frame_count: int) -> "ActorTrack":
        return cls(
            str(actor_id),
            np.asarray(box_size, dtype=np.float64),
            dict(base_poses),
            torch.zeros(frame_count, 6, dtype=DTYPE),
            torch.zeros(frame_count, 6, dtype=DTYPE),
        )

    def active(self, frame: int) -> bool:
        return frame in self.base_poses

    def correction(self, sensor: Sensor, decoupled: bool = True) -> Tensor:
        if sensor == "lidar" and decoupled:
            return self.lidar_correction
        if sensor not in ("camera", "lidar"):
            raise ValueError(f"unknown sensor {sensor!r}")
        return self.camera_correction

    def pose(self, frame: int, sensor: Sensor, decoupled: bool = True) -> tuple[Tensor, Tensor]:
        """World-from-object (quaternion, translation), base o exp(correction)."""
        return compose_with_twist(self.base_poses[frame], self.correction(sensor, decoupled)[frame])

    def corrected_pose(self, frame: int, sensor: Sensor, decoupled: bool = True) -> SE3Pose:
        q, t = self.pose(frame, sensor, decoupled)
        return SE3Pose(q.detach().numpy(), t.detach().numpy())


@dataclass
class Actor:
    track: ActorTrack
    model: SplatModel  # object frame, centered at the box center


@dataclass
class Scene:
    background: SplatModel
    actors: list[Actor]
    rig: SensorRig

    @property
    def frame_count(self) -> int:
        return self.rig.frame_count

    def actor(self, actor_id: str) -> Actor:
        for a in self.actors:
            if a.track.actor_id == str(actor_id):
                return a
        raise KeyError(f"no actor {actor_id!r}")

    def sorted_actors(self) -> list[Actor]:
        return sorted(self.actors, key=lambda a: a.track.actor_id)


def transform_model(model: SplatModel, q: Tensor, t: Tensor) -> SplatModel:
    """Rigidly move a model: means R mu + t, rotations q (x) q_i (covariance R Sigma R^T)."""
    R = quat_to_rotmat(q)
    return model.replace(
        means=model.means @ R.T + t,
        quats=quat_normalize(quat_multiply(q.expand_as(model.quats), model.quats)),
    )


def posed_actors(scene: Scene, frame: int, sensor: Sensor, decoupled: bool = True) -> list[SplatModel]:
    out = []
    for actor in scene.sorted_actors():
        if actor.track.active(frame) and len(actor.model):
            q, t = actor.track.pose(frame, sensor, decoupled)
            out.append(transform_model(actor.model, q, t))
    return out


def compose_scene(scene: Scene, frame: int, sensor: Sensor = "camera", decoupled: bool = True) -> SplatModel:
    """World-frame model for one frame and sensor: background first, then actors by id.

    With ``decoupled`` False both sensors use the camera corrections.
    """
    if not 0 <= frame < scene.frame_count:
        raise IndexError(f"frame {frame} out of range")
    return SplatModel.concat([scene.background] + posed_actors(scene, frame, sensor, decoupled))


def compose_actors(scene: Scene, frame: int, sensor: Sensor = "camera", decoupled: bool = True) -> SplatModel | None:
    parts = posed_actors(scene, frame, sensor, decoupled)
    return SplatModel.concat(parts) if parts else None


def _copy_track(track: ActorTrack, base_poses=None) -> ActorTrack:
    return dataclasses.replace(
        track,
        base_poses=dict(track.base_poses if base_poses is None else base_poses),
        camera_correction=track.camera_correction.detach().clone(),
        lidar_correction=track.lidar_correction.detach().clone(),
    )


def copy_scene(scene: Scene) -> Scene:
    return Scene(
        scene.background.detach(),
        [Actor(_copy_track(a.track), a.model.detach()) for a in scene.actors],
        dataclasses.replace(scene.rig, ego_poses=list(scene.rig.ego_poses)),
    )


def apply_actor_edit(scene: Scene, actor_id: str, delta: SE3Pose) -> Scene:
    """New scene with ``delta`` composed onto every base pose of one actor."""
    scene.actor(actor_id)
    out = copy_scene(scene)
    for a in out.actors:
        if a.track.actor_id == str(actor_id):
            a.track.base_poses = {f: p @ delta for f, p in a.track.base_poses.items()}
    return out


def apply_ego_edit(scene: Scene, delta: SE3Pose) -> Scene:
    """New scene whose sensors all move by ``delta`` expressed in the ego frame."""
    out = copy_scene(scene)
    out.rig.ego_poses = [p @ delta for p in scene.rig.ego_poses]
    return out


def lateral_shift(meters: float, axis: str = "lateral") -> SE3Pose:
    axes = {"lateral": LATERAL_AXIS, "forward": FORWARD_AXIS, "vertical": VERTICAL_AXIS}
    if axis not in axes:
        raise ValueError(f"axis must be one of {sorted(axes)}")
    return SE3Pose.translation_only(meters * axes[axis])
