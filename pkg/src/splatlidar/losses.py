"""Training objective terms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .camera import CameraRender
from .core import DTYPE, SplatModel
from .lidar import RangeImage
from .metrics import ssim_t


@dataclass
class LossWeights:
    lidar: float = 0.1
    lidar_opacity: float = 0.1
    scale_reg: float = 0.01
    camera_opacity: float = 0.05
    pseudo_depth: float = 0.0
    pose_prior: float = 0.0  # on camera corrections (the shared ones in unified mode)
    lidar_pose_prior: float = 0.0
    ssim_mix: float = 0.2
    anisotropy_cap: float = 10.0

    def __post_init__(self):
        for name in ("lidar", "lidar_opacity", "scale_reg", "camera_opacity", "pseudo_depth", "pose_prior",
                     "lidar_pose_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be nonnegative")
        if not 0.0 <= self.ssim_mix <= 1.0:
            raise ValueError("ssim_mix must be in [0, 1]")
        if not self.anisotropy_cap > 1.0:
            raise ValueError("anisotropy_cap must exceed 1")


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def masked_mean(x: Tensor, mask: Tensor) -> Tensor:
    """Mean of ``x`` over ``mask``; an empty mask gives 0."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = int(mask.sum())
    if n == 0:
        return torch.zeros((), dtype=x.dtype)
    return x[mask].sum() / n


def loss_color(pred: Tensor, gt: Tensor, ssim_mix: float = 0.2) -> Tensor:
    _same_shape(pred, gt, "color")
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    l1 = (pred - gt).abs().mean()
    if ssim_mix == 0.0:
        return l1
    return (1.0 - ssim_mix) * l1 + ssim_mix * (1.0 - ssim_t(pred, gt))


def _check_ranges(pred: RangeImage, gt: RangeImage):
    _same_shape(pred.ranges, gt.ranges, "range image")
    if pred.spec is not None and gt.spec is not None and pred.spec != gt.spec:
        raise ValueError("range images come from different LiDAR specs")


def loss_lidar(pred: RangeImage, gt: RangeImage) -> Tensor:
    """Mean absolute range error over GT-valid pixels."""
    _check_ranges(pred, gt)
    return masked_mean((pred.ranges - gt.ranges).abs(), gt.valid)


def loss_lidar_opacity(pred: RangeImage, gt: RangeImage) -> Tensor:
    """Mean of 1 - accumulated LiDAR opacity over GT-valid pixels."""
    _check_ranges(pred, gt)
    return masked_mean(1.0 - pred.opacity, gt.valid)


def loss_scale_reg(model: SplatModel, cap: float = 10.0) -> Tensor:
    """Mean hinge on the max/min scale ratio above ``cap``."""
    if len(model) == 0:
        return torch.zeros((), dtype=DTYPE)
    ls = model.log_scales
    ratio = torch.exp(ls.max(dim=-1).values - ls.min(dim=-1).values)
    return torch.clamp_min(ratio - cap, 0.0).mean()


def loss_camera_opacity(opacity: Tensor, actor_opacity, sky_mask, fg_mask, box_mask) -> Tensor:
    """Sky transparency + foreground solidity + actor containment inside their boxes."""
    for m, name in ((sky_mask, "sky"), (fg_mask, "foreground"), (box_mask, "box")):
        if m is not None:
            _same_shape(opacity, m, f"{name} mask")
    zero = torch.zeros((), dtype=opacity.dtype)
    sky = masked_mean(opacity, sky_mask) if sky_mask is not None else zero
    fg = masked_mean(1.0 - opacity, fg_mask) if fg_mask is not None else zero
    obj = zero
    if actor_opacity is not None and box_mask is not None:
        _same_shape(opacity, actor_opacity, "actor opacity")
        obj = masked_mean(actor_opacity, ~torch.as_tensor(box_mask, dtype=torch.bool))
    return sky + fg + obj


def loss_pseudo_depth(pred: Tensor, target, valid) -> Tensor:
    """Mean absolute depth error over valid pseudo-depth pixels."""
    target = torch.as_tensor(target, dtype=pred.dtype)
    _same_shape(pred, target, "pseudo depth")
    _same_shape(pred, torch.as_tensor(valid), "pseudo depth mask")
    return masked_mean((pred - target).abs(), valid)


@dataclass
class FrameRenders:
    camera: CameraRender
    lidar: RangeImage | None
    actor_opacity: Tensor | None
    model: SplatModel
    camera_corrections: Tensor | None = None  # [A, 6] twists of the active actors this frame
    lidar_corrections: Tensor | None = None


@dataclass
class FrameTargets:
    color: Tensor
    ranges: RangeImage | None
    sky_mask: Tensor | None = None
    fg_mask: Tensor | None = None
    box_mask: Tensor | None = None
    pseudo_depth: Tensor | None = None
    pseudo_valid: Tensor | None = None


def total_loss(renders: FrameRenders, targets: FrameTargets, weights: LossWeights) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted objective and its individual terms (unweighted)."""
    terms: dict[str, Tensor] = {"color": loss_color(renders.camera.color, targets.color, weights.ssim_mix)}
    total = terms["color"]
    if renders.lidar is not None and targets.ranges is not None:
        if weights.lidar:
            terms["lidar"] = loss_lidar(renders.lidar, targets.ranges)
            total = total + weights.lidar * terms["lidar"]
        if weights.lidar_opacity:
            terms["lidar_opacity"] = loss_lidar_opacity(renders.lidar, targets.ranges)
            total = total + weights.lidar_opacity * terms["lidar_opacity"]
    if weights.scale_reg:
        terms["scale_reg"] = loss_scale_reg(renders.model, weights.anisotropy_cap)
        total = total + weights.scale_reg * terms["scale_reg"]
    if weights.camera_opacity:
        terms["camera_opacity"] = loss_camera_opacity(
            renders.camera.opacity, renders.actor_opacity, targets.sky_mask, targets.fg_mask, targets.box_mask
        )
        total = total + weights.camera_opacity * terms["camera_opacity"]
    if weights.pseudo_depth and targets.pseudo_depth is not None:
        terms["pseudo_depth"] = loss_pseudo_depth(renders.camera.depth, targets.pseudo_depth, targets.pseudo_valid)
        total = total + weights.pseudo_depth * terms["pseudo_depth"]
    for name, corr in (("pose_prior", renders.camera_corrections), ("lidar_pose_prior", renders.lidar_corrections)):
        if getattr(weights, name) and corr is not None:
            terms[name] = (corr**2).sum()
            total = total + getattr(weights, name) * terms[name]
    terms["total"] = total
    return total, terms
