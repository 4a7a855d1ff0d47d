"""Pinhole camera projection and differentiable color/depth/opacity rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from . import raster
from .core import DTYPE, Gaussian3D, SplatModel, sh_colors
from .se3 import rt_of

LOWPASS = 0.3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 1e4

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class Projected2D:
    """One splat on the image plane; ``mean2d`` is (x, y) in pixels."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float


@dataclass
class ProjectedSplats:
    """Batched image-plane splats in (x, y) pixel order."""

    means2d: Tensor
    covs2d: Tensor
    depths: Tensor
    colors: Tensor
    alphas: Tensor
    valid: Tensor

    def __len__(self) -> int:
        return self.means2d.shape[0]


@dataclass
class CameraRender:
    color: Tensor  # [H, W, 3]
    depth: Tensor  # [H, W]
    opacity: Tensor  # [H, W]


def _swap_xy(means2d: Tensor, covs2d: Tensor) -> tuple[Tensor, Tensor]:
    perm = torch.tensor([1, 0])
    return means2d[:, perm], covs2d[:, perm][:, :, perm]


def project_gaussians(model: SplatModel, W, K: CameraIntrinsics, dilation: float = LOWPASS) -> ProjectedSplats:
    """Project a world-frame model through camera-from-world ``W``."""
    R, t = rt_of(W)
    p = model.means @ R.T + t
    z = p[:, 2]
    valid = (z > K.near) & (z < K.far)
    zs = torch.where(valid, z, torch.ones_like(z))
    lim_x = 1.3 * 0.5 * K.width / K.fx
    lim_y = 1.3 * 0.5 * K.height / K.fy
    tx = torch.clamp(p[:, 0] / zs, -lim_x, lim_x) * zs
    ty = torch.clamp(p[:, 1] / zs, -lim_y, lim_y) * zs
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([K.fx / zs, zero, -K.fx * tx / zs**2], -1),
            torch.stack([zero, K.fy / zs, -K.fy * ty / zs**2], -1),
        ],
        dim=-2,
    )
    M = J @ R
    cov2d = M @ model.covariances() @ M.transpose(-1, -2)
    cov2d = cov2d + dilation * torch.eye(2, dtype=DTYPE)
    means2d = torch.stack([K.fx * p[:, 0] / zs + K.cx, K.fy * p[:, 1] / zs + K.cy], -1)
    center = -(R.T @ t)
    dirs = model.means - center
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    colors = sh_colors(model.sh_degree, model.sh, dirs)
    return ProjectedSplats(means2d, cov2d, z, colors, model.alphas, valid)


def project_to_image(g: Gaussian3D, W, K: CameraIntrinsics, dilation: float = LOWPASS) -> Projected2D | None:
    """Project one splat; returns ``None`` when it falls outside the near/far range."""
    sh = np.asarray(g.sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[0]))) - 1
    proj = project_gaussians(SplatModel.from_gaussians([g], degree), W, K, dilation)
    if not bool(proj.valid[0]):
        return None
    return Projected2D(
        mean2d=proj.means2d[0].numpy(),
        cov2d=proj.covs2d[0].numpy(),
        depth=float(proj.depths[0]),
        color=proj.colors[0].numpy(),
        alpha=float(proj.alphas[0]),
    )


def composite_projected(
    proj: ProjectedSplats,
    K: CameraIntrinsics,
    *,
    background=None,
    normalize_depth: bool = False,
    early_stop: float = raster.DEFAULT_EARLY_STOP,
    cutoff: float = raster.DEFAULT_CUTOFF,
    tile: int = raster.DEFAULT_TILE,
) -> CameraRender:
    grid = raster.Grid(K.height, K.width, 0.5, 0.5, tile)
    means_rc, covs_rc = _swap_xy(proj.means2d, proj.covs2d)
    feats = torch.cat([proj.colors, proj.depths[:, None]], dim=-1)
    bg = np.zeros(4)
    if background is not None:
        bg[:3] = np.broadcast_to(np.asarray(background, dtype=np.float64), 3)
    out = raster.composite(
        means_rc, covs_rc, proj.alphas, feats, proj.depths, grid,
        valid=proj.valid, background=bg, early_stop=early_stop, cutoff=cutoff,
    )
    depth = out.features[..., 3]
    if normalize_depth:
        depth = torch.where(out.opacity > 0, depth / out.opacity.clamp_min(1e-300), torch.zeros_like(depth))
    return CameraRender(out.features[..., :3], depth, out.opacity)


def rasterize_camera(
    model: SplatModel,
    W,
    K: CameraIntrinsics,
    *,
    background=None,
    normalize_depth: bool = False,
    early_stop: float = raster.DEFAULT_EARLY_STOP,
    cutoff: float = raster.DEFAULT_CUTOFF,
    dilation: float = LOWPASS,
    tile: int = raster.DEFAULT_TILE,
) -> CameraRender:
    """Render color, z-depth and accumulated opacity through camera-from-world ``W``.

    Depth is the raw weighted sum of splat z-depths unless ``normalize_depth``
    divides it by the accumulated opacity.
    """
    if len(model) == 0:
        raise ValueError("cannot render an empty model")
    proj = project_gaussians(model, W, K, dilation)
    return composite_projected(
        proj, K, background=background, normalize_depth=normalize_depth,
        early_stop=early_stop, cutoff=cutoff, tile=tile,
    )


def pseudo_depth_target(points, W, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Sparse z-buffered depth image of world points; returns (depth, valid)."""
    depth = np.full((K.height, K.width), np.inf)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        R, t = (x.numpy() for x in rt_of(W))
        pc = pts @ R.T + t
        z = pc[:, 2]
        front = (z > K.near) & (z < K.far)
        pc, z = pc[front], z[front]
        col = np.floor(K.fx * pc[:, 0] / z + K.cx).astype(np.int64)
        row = np.floor(K.fy * pc[:, 1] / z + K.cy).astype(np.int64)
        inside = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
        np.minimum.at(depth, (row[inside], col[inside]), z[inside])
    valid = np.isfinite(depth)
    return np.where(valid, depth, 0.0), valid
