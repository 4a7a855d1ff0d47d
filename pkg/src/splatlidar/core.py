"""Splat primitives, parameter activations, covariance and SH color."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

DTYPE = torch.float64

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def num_sh_coeffs(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sigmoid(x):
    if isinstance(x, Tensor):
        return torch.sigmoid(x)
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    if isinstance(p, Tensor):
        return torch.log(p) - torch.log1p(-p)
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_sh_dc(rgb):
    return (rgb - 0.5) / SH_C0


def lidar_alpha(alpha, gamma):
    """LiDAR opacity of a splat: camera opacity scaled by its LiDAR visibility."""
    return alpha * gamma


# -- quaternions (w, x, y, z) ------------------------------------------------


def quat_normalize(q: Tensor) -> Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Rotation matrices [..., 3, 3] from (possibly unnormalized) quaternions."""
    w, x, y, z = quat_normalize(q).unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def covariances(quats: Tensor, scales: Tensor) -> Tensor:
    """Batched R diag(S)^2 R^T for activated (positive) scales."""
    R = quat_to_rotmat(quats)
    M = R * scales[..., None, :]
    return M @ M.transpose(-1, -2)


def build_covariance(q: Sequence[float], S: Sequence[float]) -> np.ndarray:
    """Covariance R S S^T R^T of one splat.

    ``q`` is renormalized; scales must be strictly positive.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (3,) or np.any(~(S > 0)):
        raise ValueError(f"scales must be three positive values, got {S}")
    q = torch.as_tensor(np.asarray(q, dtype=np.float64))
    if q.shape != (4,) or torch.linalg.norm(q) == 0:
        raise ValueError("rotation must be a nonzero 4-vector quaternion")
    return covariances(q, torch.as_tensor(S)).numpy()


# -- spherical harmonics ------------------------------------------------------


def eval_sh(degree: int, sh: Tensor, dirs: Tensor) -> Tensor:
    """Evaluate real SH ``sh`` [..., K, 3] along unit ``dirs`` [..., 3] (no offset)."""
    k = num_sh_coeffs(degree)
    if sh.shape[-2] != k:
        raise ValueError(f"degree {degree} needs {k} SH coefficients, got {sh.shape[-2]}")
    out = SH_C0 * sh[..., 0, :]
    if degree < 1:
        return out
    x, y, z = (dirs[..., i : i + 1] for i in range(3))
    out = out - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = (
        out
        + SH_C2[0] * xy * sh[..., 4, :]
        + SH_C2[1] * yz * sh[..., 5, :]
        + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
        + SH_C2[3] * xz * sh[..., 7, :]
        + SH_C2[4] * (xx - yy) * sh[..., 8, :]
    )
    if degree < 3:
        return out
    return (
        out
        + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9, :]
        + SH_C3[1] * xy * z * sh[..., 10, :]
        + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11, :]
        + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12, :]
        + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13, :]
        + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
        + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15, :]
    )


def sh_colors(degree: int, sh: Tensor, dirs: Tensor) -> Tensor:
    """SH radiance offset by +0.5 and clamped below at zero."""
    return torch.clamp_min(eval_sh(degree, sh, dirs) + 0.5, 0.0)


def sh_to_color(sh, view_dir, degree: int | None = None) -> np.ndarray:
    sh = torch.as_tensor(np.asarray(sh, dtype=np.float64))
    if degree is None:
        degree = int(round(np.sqrt(sh.shape[0]))) - 1
    d = torch.as_tensor(np.asarray(view_dir, dtype=np.float64))
    return sh_colors(degree, sh, d).numpy()


# -- containers ---------------------------------------------------------------


@dataclass
class Gaussian3D:
    """One splat in unconstrained parameter space."""

    mean: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    lidar_vis_logit: float = 4.0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def alpha(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def gamma(self) -> float:
        return float(sigmoid(self.lidar_vis_logit))

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rot, self.scale)


def _field(*shape):
    return field(default_factory=lambda: torch.zeros(shape, dtype=DTYPE))


@dataclass
class SplatModel:
    """Structure-of-arrays splat collection.

    All tensors share the leading dimension N. ``sh`` is [N, K, 3] with
    K = (sh_degree + 1)**2.
    """

    means: Tensor = _field(0, 3)
    quats: Tensor = _field(0, 4)
    log_scales: Tensor = _field(0, 3)
    opacity_logits: Tensor = _field(0)
    sh: Tensor = _field(0, 1, 3)
    lidar_vis_logits: Tensor = _field(0)
    sh_degree: int = 0

    PARAMS = ("means", "quats", "log_scales", "opacity_logits", "sh", "lidar_vis_logits")

    def __post_init__(self):
        n = self.means.shape[0]
        k = num_sh_coeffs(self.sh_degree)
        for name in self.PARAMS:
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.sh.shape[1:] != (k, 3):
            raise ValueError(f"sh must be [N, {k}, 3] for degree {self.sh_degree}")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    @property
    def alphas(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def gammas(self) -> Tensor:
        return torch.sigmoid(self.lidar_vis_logits)

    @property
    def lidar_alphas(self) -> Tensor:
        return lidar_alpha(self.alphas, self.gammas)

    def covariances(self) -> Tensor:
        return covariances(self.quats, self.scales)

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.PARAMS}

    def replace(self, **tensors) -> "SplatModel":
        kw = self.tensors()
        kw.update(tensors)
        return SplatModel(sh_degree=self.sh_degree, **kw)

    def detach(self) -> "SplatModel":
        return self.replace(**{k: v.detach().clone() for k, v in self.tensors().items()})

    def select(self, index) -> "SplatModel":
        return self.replace(**{k: v[index] for k, v in self.tensors().items()})

    @staticmethod
    def concat(models: Sequence["SplatModel"]) -> "SplatModel":
        degrees = {m.sh_degree for m in models}
        if len(degrees) != 1:
            raise ValueError("cannot concatenate models with different sh_degree")
        return SplatModel(
            sh_degree=degrees.pop(),
            **{k: torch.cat([getattr(m, k) for m in models]) for k in SplatModel.PARAMS},
        )

    @staticmethod
    def from_gaussians(gaussians: Sequence[Gaussian3D], sh_degree: int = 0) -> "SplatModel":
        k = num_sh_coeffs(sh_degree)

        def stack(attr, shape):
            return torch.as_tensor(
                np.array([np.asarray(getattr(g, attr), dtype=np.float64).reshape(shape) for g in gaussians]),
                dtype=DTYPE,
            ).reshape((len(gaussians),) + shape)

        return SplatModel(
            means=stack("mean", (3,)),
            quats=stack("rot", (4,)),
            log_scales=stack("log_scale", (3,)),
            opacity_logits=stack("opacity_logit", ()),
            sh=stack("sh", (k, 3)),
            lidar_vis_logits=stack("lidar_vis_logit", ()),
            sh_degree=sh_degree,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].detach().numpy().copy(),
            rot=self.quats[i].detach().numpy().copy(),
            log_scale=self.log_scales[i].detach().numpy().copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].detach().numpy().copy(),
            lidar_vis_logit=float(self.lidar_vis_logits[i]),
        )
