"""LiDAR range-image rasterization of splat models.

Splats are moved into the sensor frame, converted to spherical coordinates
(range, azimuth, elevation), projected onto the (beam row, azimuth bin)
grid, optionally scale compensated, and composited front-to-back by range
with opacity ``alpha * gamma``. Alongside the composited range each pixel
carries the accumulated LiDAR opacity and the alpha-weighted range
variance, which flags pixels that mix surfaces at different depths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import raster
from .core import DTYPE, SplatModel
from .se3 import rt_of

POLE_EPS = 1e-6
LAMBDA_MIN = 0.5
GAMMA_TH = 1.0


@dataclass(frozen=True)
class LidarSpec:
    """Beam elevation table (radians), azimuth bin count and valid range interval.

    Splats whose elevation lies more than ``cull_margin`` local beam spacings
    outside the beam table are culled.
    """

    inclinations: np.ndarray
    azimuth_bins: int
    min_range: float = 0.5
    max_range: float = 250.0
    cull_margin: float = 1.0

    def __post_init__(self):
        inc = np.asarray(self.inclinations, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "inclinations", inc)
        if inc.size < 2:
            raise ValueError("need at least two beams")
        d = np.diff(inc)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("inclinations must be strictly monotone")
        if self.azimuth_bins < 8:
            raise ValueError("need at least 8 azimuth bins")
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        if not self.cull_margin >= 0:
            raise ValueError("cull_margin must be nonnegative")

    @classmethod
    def uniform(cls, beams=32, low_deg=-15.0, high_deg=15.0, azimuth_bins=900, min_range=0.5, max_range=250.0,
                cull_margin=1.0):
        return cls(np.deg2rad(np.linspace(low_deg, high_deg, beams)), azimuth_bins, min_range, max_range, cull_margin)

    def __eq__(self, other):
        return (
            isinstance(other, LidarSpec)
            and np.array_equal(self.inclinations, other.inclinations)
            and (self.azimuth_bins, self.min_range, self.max_range, self.cull_margin)
            == (other.azimuth_bins, other.min_range, other.max_range, other.cull_margin)
        )

    def __hash__(self):
        return hash((self.inclinations.tobytes(), self.azimuth_bins, self.min_range, self.max_range, self.cull_margin))

    @property
    def beams(self) -> int:
        return self.inclinations.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.beams, self.azimuth_bins

    @property
    def beam_spacing(self) -> np.ndarray:
        """Local elevation step per row: central differences, one-sided at the ends."""
        return np.abs(np.gradient(self.inclinations))

    def azimuth_centers(self) -> np.ndarray:
        return (np.arange(self.azimuth_bins) + 0.5) * (2.0 * np.pi / self.azimuth_bins)

    def ray_directions(self) -> np.ndarray:
        """Unit directions [M, W, 3] of every (beam, azimuth bin center) ray in the sensor frame."""
        phi = self.inclinations[:, None]
        th = self.azimuth_centers()[None, :]
        return np.stack(
            np.broadcast_arrays(np.cos(phi) * np.cos(th), np.cos(phi) * np.sin(th), np.sin(phi)), axis=-1
        )

    def nearest_row(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        return np.argmin(np.abs(phi[..., None] - self.inclinations), axis=-1)

    def row_coordinate(self, phi: Tensor) -> Tensor:
        """Fractional row index: piecewise-linear in elevation, linear beyond the ends."""
        inc = torch.as_tensor(self.inclinations, dtype=DTYPE)
        if inc[0] > inc[-1]:
            return (self.beams - 1) - _interp_index(phi, inc.flip(0))
        return _interp_index(phi, inc)


def _interp_index(phi: Tensor, inc: Tensor) -> Tensor:
    seg = torch.clamp(torch.searchsorted(inc, phi.detach()) - 1, 0, inc.numel() - 2)
    lo, hi = inc[seg], inc[seg + 1]
    return seg.to(DTYPE) + (phi - lo) / (hi - lo)


@dataclass
class SphericalGaussian:
    mean_sph: np.ndarray  # (r, azimuth, elevation)
    cov_sph: np.ndarray


@dataclass
class RangeProjection:
    row: int
    v: float
    u: float
    cov: np.ndarray


@dataclass
class RangeImage:
    """Range-image channels over the M x W beam/azimuth grid."""

    ranges: Tensor
    valid: Tensor
    opacity: Tensor
    uncertainty: Tensor
    spec: LidarSpec | None = field(default=None, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.ranges.shape)

    @classmethod
    def from_numpy(cls, ranges, valid, opacity=None, uncertainty=None, spec=None) -> "RangeImage":
        ranges = torch.as_tensor(np.asarray(ranges, dtype=np.float64))
        valid = torch.as_tensor(np.asarray(valid, dtype=bool))
        opacity = valid.to(DTYPE) if opacity is None else torch.as_tensor(np.asarray(opacity, dtype=np.float64))
        unc = torch.zeros_like(ranges) if uncertainty is None else torch.as_tensor(np.asarray(uncertainty, dtype=np.float64))
        return cls(ranges, valid, opacity, unc, spec)

    def detach(self) -> "RangeImage":
        return RangeImage(
            self.ranges.detach(), self.valid.detach(), self.opacity.detach(), self.uncertainty.detach(), self.spec
        )


# -- spherical conversion ------------------------------------------------------


def cart_to_sph_t(p: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    x, y, z = p.unbind(-1)
    r = torch.linalg.norm(p, dim=-1)
    rs = torch.where(r > 0, r, torch.ones_like(r))
    return r, torch.atan2(y, x), torch.asin(torch.clamp(z / rs, -1.0, 1.0))


def sph_jacobian_t(p: Tensor) -> Tensor:
    """Jacobian of (r, azimuth, elevation) w.r.t. (x, y, z), rows in that order."""
    x, y, z = p.unbind(-1)
    r2 = (p * p).sum(-1)
    rho2 = x * x + y * y
    ok = rho2 > 0
    r2 = torch.where(ok, r2, torch.ones_like(r2))
    rho2 = torch.where(ok, rho2, torch.ones_like(rho2))
    r = torch.sqrt(r2)
    rho = torch.sqrt(rho2)
    zero = torch.zeros_like(r)
    return torch.stack(
        [
            torch.stack([x / r, y / r, z / r], -1),
            torch.stack([-y / rho2, x / rho2, zero], -1),
            torch.stack([-x * z / (r2 * rho), -y * z / (r2 * rho), rho / r2], -1),
        ],
        dim=-2,
    )


def cart_to_sph(mu) -> tuple[float, float, float]:
    p = torch.as_tensor(np.asarray(mu, dtype=np.float64))
    if float(torch.linalg.norm(p)) < 1e-9:
        raise ValueError("degenerate point at the sensor origin")
    r, th, ph = cart_to_sph_t(p)
    return float(r), float(th), float(ph)


def sph_jacobian(mu) -> np.ndarray:
    p = torch.as_tensor(np.asarray(mu, dtype=np.float64))
    r, _, phi = cart_to_sph_t(p)
    if float(r) < 1e-9 or abs(float(phi)) > math.pi / 2 - POLE_EPS:
        raise ValueError("point lies at a pole of the spherical parameterization")
    return sph_jacobian_t(p).numpy()


def spherical_gaussian(mu, cov) -> SphericalGaussian:
    J = sph_jacobian(mu)
    return SphericalGaussian(np.array(cart_to_sph(mu)), J @ np.asarray(cov, dtype=np.float64) @ J.T)


# -- range-grid projection and scale compensation -------------------------------


def clamp_eigenvalues(cov: Tensor, floor: Tensor) -> Tensor:
    """Raise eigenvalues of symmetric [N, 2, 2] ``cov`` to at least ``floor`` [N].

    Eigenvectors are preserved. Closed form, so gradients stay finite when the
    eigenvalues coincide.
    """
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    with torch.no_grad():
        h = 0.5 * (a - c)
        rad = torch.sqrt(h * h + b * b)
        lo = 0.5 * (a + c) - rad
        hi = 0.5 * (a + c) + rad
        both = hi < floor
        one = (lo < floor) & ~both
    eye = torch.eye(2, dtype=cov.dtype).expand_as(cov)
    dummy = torch.diag(torch.tensor([1.0, 2.0], dtype=cov.dtype)).expand_as(cov)
    c1 = torch.where(one[:, None, None], cov, dummy)
    a1, b1, d1 = c1[:, 0, 0], c1[:, 0, 1], c1[:, 1, 1]
    h1 = 0.5 * (a1 - d1)
    r1 = torch.sqrt(h1 * h1 + b1 * b1)
    lo1 = 0.5 * (a1 + d1) - r1
    hi1 = 0.5 * (a1 + d1) + r1
    proj_lo = (hi1[:, None, None] * eye - c1) / (2.0 * r1)[:, None, None]
    raised = c1 + (floor - lo1)[:, None, None] * proj_lo
    out = torch.where(one[:, None, None], raised, cov)
    return torch.where(both[:, None, None], floor[:, None, None] * eye, out)


def visible_scale(d, azimuth_bins: int):
    """Metric footprint of one azimuth step at distance ``d``."""
    return d * math.tan(2.0 * math.pi / azimuth_bins)


def compensate_scale(cov, d: float, azimuth_bins: int) -> np.ndarray:
    """Raise every standard deviation of a metric 2x2 footprint to at least s_vis / 3."""
    cov = np.asarray(cov, dtype=np.float64)
    if not d > 0:
        raise ValueError("distance must be positive")
    if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-9:
        raise ValueError("footprint covariance is not positive semidefinite")
    floor = (visible_scale(d, azimuth_bins) / 3.0) ** 2
    t = torch.as_tensor(0.5 * (cov + cov.T))[None]
    return clamp_eigenvalues(t, torch.tensor([floor], dtype=DTYPE))[0].numpy()


@dataclass
class _RangeSplats:
    v: Tensor
    u: Tensor
    cov: Tensor
    r: Tensor
    row: Tensor
    valid: Tensor


def _project_sph(r: Tensor, theta: Tensor, phi: Tensor, cov_sph: Tensor, spec: LidarSpec,
                 compensate: bool, snap_rows: bool = False) -> _RangeSplats:
    inc = spec.inclinations
    spacing = spec.beam_spacing
    with torch.no_grad():
        phi_np = phi.detach().numpy()
        row = torch.as_tensor(spec.nearest_row(phi_np))
        k = spec.cull_margin
        band = (phi_np >= inc.min() - k * spacing[np.argmin(inc)]) & (phi_np <= inc.max() + k * spacing[np.argmax(inc)])
        valid = torch.as_tensor(band) & (r >= 0.5 * spec.min_range) & (r <= 1.5 * spec.max_range)
    sub = cov_sph[:, [2, 1]][:, :, [2, 1]]
    if compensate:
        rs = torch.where(r > 0, r, torch.ones_like(r))[:, None, None]
        floor = (visible_scale(rs[:, 0, 0], spec.azimuth_bins) / 3.0) ** 2
        sub = clamp_eigenvalues(sub * rs**2, floor) / rs**2
    scale = torch.stack(
        [1.0 / torch.as_tensor(spacing, dtype=DTYPE)[row], torch.full_like(r, spec.azimuth_bins / (2 * math.pi))], -1
    )
    cov = sub * scale[:, :, None] * scale[:, None, :]
    v = row.to(DTYPE) if snap_rows else spec.row_coordinate(phi)
    u = torch.remainder(theta * (spec.azimuth_bins / (2 * math.pi)), spec.azimuth_bins)
    return _RangeSplats(v, u, cov, r, row, valid)


def project_to_range(sg: SphericalGaussian, spec: LidarSpec, compensate: bool = False) -> RangeProjection | None:
    """Place one spherical Gaussian on the range grid; ``None`` if it falls outside."""
    r, th, ph = (torch.tensor([x], dtype=DTYPE) for x in sg.mean_sph)
    cov = torch.as_tensor(np.asarray(sg.cov_sph, dtype=np.float64))[None]
    out = _project_sph(r, th, ph, cov, spec, compensate)
    if not bool(out.valid[0]):
        return None
    return RangeProjection(int(out.row[0]), float(out.v[0]), float(out.u[0]), out.cov[0].numpy())


@dataclass
class LidarSplats:
    """Range-grid splats in (row, azimuth) pixel order, before seam duplication."""

    means2d: Tensor
    covs2d: Tensor
    ranges: Tensor
    alphas: Tensor
    valid: Tensor

    def __len__(self) -> int:
        return self.means2d.shape[0]


def project_gaussians_lidar(
    model: SplatModel, lidar_pose, spec: LidarSpec, *, compensate: bool = True, snap_rows: bool = False
) -> LidarSplats:
    """Project a world-frame model through world-from-lidar ``lidar_pose``."""
    R, t = rt_of(lidar_pose)
    p = (model.means - t) @ R
    cov = R.T @ model.covariances() @ R
    with torch.no_grad():
        rp = torch.linalg.norm(p, dim=-1)
        ok = (rp > 1e-9) & (p[:, 2].abs() < rp * math.cos(POLE_EPS))
    # culled splats near the origin or poles get a harmless stand-in so no NaN leaks into gradients
    p = torch.where(ok[:, None], p, torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE))
    r, theta, phi = cart_to_sph_t(p)
    J = sph_jacobian_t(p)
    cov_sph = J @ cov @ J.transpose(-1, -2)
    rs = _project_sph(r, theta, phi, torch.where(ok[:, None, None], cov_sph, torch.eye(3, dtype=DTYPE)), spec,
                      compensate, snap_rows)
    return LidarSplats(torch.stack([rs.v, rs.u], -1), rs.cov, r, model.lidar_alphas, rs.valid & ok)


def composite_lidar(
    splats: LidarSplats,
    spec: LidarSpec,
    *,
    lambda_min: float = LAMBDA_MIN,
    normalize_range: bool = True,
    normalize_uncertainty: bool = False,
    early_stop: float = raster.DEFAULT_EARLY_STOP,
    cutoff: float = raster.DEFAULT_CUTOFF,
    tile: int = raster.DEFAULT_TILE,
) -> RangeImage:
    W = spec.azimuth_bins
    with torch.no_grad():
        with np.errstate(divide="ignore"):
            ext, keep = raster.footprint_extent(splats.covs2d.detach().numpy(), splats.alphas.detach().numpy(), cutoff)
        u = splats.means2d[:, 1].detach().numpy()
        keep &= splats.valid.numpy()
        left = np.nonzero(keep & (u - ext[:, 1] < 0))[0]
        right = np.nonzero(keep & (u + ext[:, 1] > W))[0]
    n = len(splats)
    idx = torch.as_tensor(np.concatenate([np.arange(n), left, right]))
    shift = torch.as_tensor(
        np.concatenate([np.zeros(n), np.full(left.size, float(W)), np.full(right.size, -float(W))])
    )
    means = splats.means2d[idx] + torch.stack([torch.zeros_like(shift), shift], -1)
    r = splats.ranges[idx]
    out = raster.composite(
        means, splats.covs2d[idx], splats.alphas[idx], r[:, None], r, raster.Grid(spec.beams, W, 0.0, 0.5, tile),
        valid=splats.valid[idx], welford_channel=0, early_stop=early_stop, cutoff=cutoff,
    )
    lam = out.opacity
    ranges = out.mean if normalize_range else out.features[..., 0]
    unc = out.variance
    if normalize_uncertainty:
        unc = torch.where(lam > 0, unc / lam.clamp_min(1e-300), torch.zeros_like(unc))
    return RangeImage(ranges, lam > lambda_min, lam, unc, spec)


def rasterize_lidar(
    model: SplatModel,
    lidar_pose,
    spec: LidarSpec,
    *,
    compensate: bool = True,
    snap_rows: bool = False,
    lambda_min: float = LAMBDA_MIN,
    normalize_range: bool = True,
    normalize_uncertainty: bool = False,
    early_stop: float = raster.DEFAULT_EARLY_STOP,
    cutoff: float = raster.DEFAULT_CUTOFF,
    tile: int = raster.DEFAULT_TILE,
) -> RangeImage:
    """Render a range image through world-from-lidar ``lidar_pose``.

    ``ranges`` is the opacity-normalized composited ray range (``normalize_range``
    False gives the raw weighted sum), ``opacity`` the accumulated LiDAR alpha
    and ``uncertainty`` the unnormalized weighted range variance.
    """
    if len(model) == 0:
        raise ValueError("cannot render an empty model")
    splats = project_gaussians_lidar(model, lidar_pose, spec, compensate=compensate, snap_rows=snap_rows)
    return composite_lidar(
        splats, spec, lambda_min=lambda_min, normalize_range=normalize_range,
        normalize_uncertainty=normalize_uncertainty, early_stop=early_stop, cutoff=cutoff, tile=tile,
    )


def range_to_pointcloud(ri: RangeImage, spec: LidarSpec, gamma_th: float = GAMMA_TH) -> np.ndarray:
    """Sensor-frame points of valid pixels whose uncertainty is at most ``gamma_th``."""
    if not gamma_th > 0:
        raise ValueError("uncertainty threshold must be positive")
    ranges = np.asarray(ri.ranges.detach() if isinstance(ri.ranges, Tensor) else ri.ranges, dtype=np.float64)
    valid = np.asarray(ri.valid, dtype=bool)
    unc = np.asarray(ri.uncertainty.detach() if isinstance(ri.uncertainty, Tensor) else ri.uncertainty)
    keep = valid & (unc <= gamma_th)
    return (spec.ray_directions() * ranges[..., None])[keep]
