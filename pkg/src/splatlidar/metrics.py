"""Image and range-image quality metrics."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .core import DTYPE

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b) -> float:
    """PSNR in dB of two images clamped to [0, 1]; identical images give the 99 dB cap."""
    a, b = _as_tensor(a).detach(), _as_tensor(b).detach()
    _check_shapes(a, b)
    mse = float(((a.clamp(0, 1) - b.clamp(0, 1)) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Per-channel SSIM map over the valid (unpadded) window positions.

    ``a`` and ``b`` are [H, W] or [H, W, C].
    """
    _check_shapes(a, b)
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    # the window is separable, so blur rows then columns, all five fields in one pass
    g = gaussian_kernel().to(a.dtype)
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    z = torch.cat([x, y, x * x, y * y, x * y])[None]
    n = z.shape[1]
    z = F.conv2d(z, g.view(1, 1, 1, -1).expand(n, 1, 1, SSIM_WINDOW), groups=n)
    z = F.conv2d(z, g.view(1, 1, -1, 1).expand(n, 1, SSIM_WINDOW, 1), groups=n)
    mx, my, exx, eyy, exy = z[0].split(C)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim_t(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable mean SSIM (channels averaged)."""
    return ssim_map(a, b).mean()


def ssim(a, b) -> float:
    return float(ssim_t(_as_tensor(a).detach(), _as_tensor(b).detach()))


def lidar_errors(pred, gt) -> np.ndarray:
    """Absolute range errors over GT-valid pixels.

    A GT return that the render drops is charged ``|max_range - gt|``.
    """
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValueError(f"range image shapes differ: {pred.shape} vs {gt.shape}")
    spec = gt.spec or pred.spec
    if pred.spec is not None and gt.spec is not None and pred.spec != gt.spec:
        raise ValueError("range images come from different LiDAR specs")
    r = pred.ranges.detach().numpy()
    g = gt.ranges.detach().numpy()
    gv = gt.valid.numpy().astype(bool)
    pv = pred.valid.numpy().astype(bool)
    if spec is None:
        raise ValueError("range images need a LiDAR spec to charge dropped returns")
    err = np.where(pv, np.abs(r - g), np.abs(spec.max_range - g))
    return err[gv]


def lidar_error(pred, gt) -> tuple[float, float]:
    """(mean, median) absolute range error in meters."""
    err = lidar_errors(pred, gt)
    if err.size == 0:
        return 0.0, 0.0
    return float(err.mean()), float(np.median(err))
