"""Rigid poses and the twist parameterization used for pose corrections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation
from torch import Tensor

from .core import DTYPE, quat_multiply, quat_normalize, quat_to_rotmat


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform x -> R x + t, rotation stored as a (w, x, y, z) quaternion."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "SE3Pose":
        T = np.asarray(T, dtype=np.float64)
        xyzw = Rotation.from_matrix(T[:3, :3]).as_quat()
        return cls(np.roll(xyzw, 1), T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "SE3Pose":
        xyzw = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_quat()
        return cls(np.roll(xyzw, 1), translation)

    @classmethod
    def translation_only(cls, t) -> "SE3Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(torch.as_tensor(self.rotation)).numpy()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        q = quat_multiply(torch.as_tensor(self.rotation), torch.as_tensor(other.rotation))
        return SE3Pose(q.numpy(), self.R @ other.translation + self.translation)

    def inverse(self) -> "SE3Pose":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return SE3Pose(q, -(self.R.T @ self.translation))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def torch_rt(self) -> tuple[Tensor, Tensor]:
        return torch.as_tensor(self.R, dtype=DTYPE), torch.as_tensor(self.translation, dtype=DTYPE)


def quat_exp(rotvec: Tensor) -> Tensor:
    """Unit quaternion of an axis-angle vector; smooth at the origin."""
    th2 = (rotvec * rotvec).sum(-1, keepdim=True)
    small = th2 < 1e-10
    th = torch.sqrt(torch.where(small, torch.ones_like(th2), th2))
    half_sinc = torch.where(small, 0.5 - th2 / 48.0, torch.sin(0.5 * th) / th)
    w = torch.where(small, 1.0 - th2 / 8.0, torch.cos(0.5 * th))
    return quat_normalize(torch.cat([w, half_sinc * rotvec], dim=-1))


def twist_to_quat_trans(twist: Tensor) -> tuple[Tensor, Tensor]:
    """Split a [..., 6] twist (rotvec, translation) into a quaternion and translation."""
    return quat_exp(twist[..., :3]), twist[..., 3:]


def compose_with_twist(base: SE3Pose, twist: Tensor) -> tuple[Tensor, Tensor]:
    """Quaternion and translation of base o exp(twist), differentiable in ``twist``."""
    dq, dt = twist_to_quat_trans(twist)
    bq = torch.as_tensor(base.rotation, dtype=DTYPE)
    R, t = base.torch_rt()
    return quat_multiply(bq, dq), R @ dt + t


def twist_pose(twist) -> SE3Pose:
    twist = torch.as_tensor(np.asarray(twist, dtype=np.float64))
    q, t = twist_to_quat_trans(twist)
    return SE3Pose(q.numpy(), t.numpy())


def rt_of(pose) -> tuple[Tensor, Tensor]:
    """(R, t) tensors from an SE3Pose, a 4x4 matrix, or an (R, t) pair."""
    if isinstance(pose, SE3Pose):
        return pose.torch_rt()
    if isinstance(pose, tuple):
        return pose
    T = torch.as_tensor(pose, dtype=DTYPE)
    return T[:3, :3], T[:3, 3]
