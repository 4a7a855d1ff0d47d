import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from splatlidar.core import Gaussian3D, SplatModel, logit
from splatlidar.lidar import (
    LidarSpec, RangeImage, SphericalGaussian, cart_to_sph, compensate_scale, project_to_range, range_to_pointcloud,
    rasterize_lidar, sph_jacobian, visible_scale,
)
from splatlidar.oracle import numeric_jacobian
from splatlidar.se3 import SE3Pose

I = SE3Pose.identity()


def on_beam(spec, row, col, rng_m, sigma=0.02, alpha=0.999, gamma=0.999, col_offset=0.0):
    th = (col + 0.5 + col_offset) * 2 * math.pi / spec.azimuth_bins
    ph = spec.inclinations[row]
    p = rng_m * np.array([math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])
    return Gaussian3D(p, np.array([1.0, 0, 0, 0]), np.log(np.full(3, sigma)), float(logit(alpha)),
                      np.zeros((1, 3)), float(logit(gamma)))


@pytest.mark.parametrize("p,want", [((1, 0, 0), (1, 0, 0)), ((0, 2, 0), (2, math.pi / 2, 0)),
                                    ((1, 1, math.sqrt(2)), (2, math.pi / 4, math.pi / 4))])
def test_cart_to_sph(p, want):
    np.testing.assert_allclose(cart_to_sph(p), want, atol=1e-15)


def test_cart_to_sph_degenerate():
    with pytest.raises(ValueError):
        cart_to_sph([0, 0, 0])


def test_jacobian_examples():
    np.testing.assert_allclose(sph_jacobian([1, 0, 0]), np.eye(3), atol=1e-15)
    J = sph_jacobian([1, 2, 2])
    N = numeric_jacobian(lambda x: np.array(cart_to_sph(x)), [1.0, 2.0, 2.0])
    assert np.abs(J - N).max() <= 1e-6
    with pytest.raises(ValueError):
        sph_jacobian([0, 0, 1])


def test_range_projection_example():
    spec = LidarSpec(np.deg2rad([-10.0, 0.0, 10.0]), 360, 0.5, 250)
    pr = project_to_range(SphericalGaussian(np.array([50.0, math.pi / 2, math.radians(0.1)]), np.eye(3) * 1e-6), spec)
    assert pr.row == 1
    assert pr.u == pytest.approx(90.0)


def test_range_projection_wraps():
    spec = LidarSpec.uniform()
    a = project_to_range(SphericalGaussian(np.array([10.0, math.pi - 1e-4, 0.0]), np.eye(3) * 1e-6), spec)
    b = project_to_range(SphericalGaussian(np.array([10.0, -math.pi + 1e-4, 0.0]), np.eye(3) * 1e-6), spec)
    d = abs(a.u - b.u)
    assert min(d, spec.azimuth_bins - d) < 1.0


def test_range_projection_covariance_by_hand():
    spec = LidarSpec.uniform(beams=16, low_deg=-15, high_deg=15, azimuth_bins=900)
    s2, dth = 1e-4, math.radians(2.0)
    pr = project_to_range(SphericalGaussian(np.array([20.0, 0.3, 0.0]), np.eye(3) * s2), spec)
    want = np.diag([s2 / dth**2, s2 * 900**2 / (4 * math.pi**2)])
    np.testing.assert_allclose(pr.cov, want, rtol=1e-10)


def test_range_projection_culls():
    spec = LidarSpec.uniform()
    assert project_to_range(SphericalGaussian(np.array([10.0, 0.0, math.radians(40)]), np.eye(3)), spec) is None
    assert project_to_range(SphericalGaussian(np.array([0.2, 0.0, 0.0]), np.eye(3)), spec) is None
    assert project_to_range(SphericalGaussian(np.array([400.0, 0.0, 0.0]), np.eye(3)), spec) is None


@pytest.mark.parametrize("margin,kept", [(1.0, False), (3.0, True)])
def test_cull_margin_in_beam_spacings(margin, kept):
    # uniform 32 beams over 30 degrees: spacing 30/31 degrees; this splat sits two spacings below the lowest beam
    spec = LidarSpec.uniform(cull_margin=margin)
    phi = math.radians(-15.0 - 2 * 30.0 / 31)
    pr = project_to_range(SphericalGaussian(np.array([10.0, 0.3, phi]), np.eye(3) * 1e-4), spec)
    assert (pr is not None) == kept
    if kept:
        assert pr.v == pytest.approx(-2.0, abs=1e-9)


def test_cull_margin_nonnegative():
    with pytest.raises(ValueError):
        LidarSpec.uniform(cull_margin=-1.0)


def test_visible_scale_value():
    assert visible_scale(100, 1800) == pytest.approx(0.34907, abs=1e-5)


def test_compensate_examples():
    d, W = 100.0, 1800
    s = visible_scale(d, W) / 3
    big = np.diag([0.5**2, 0.4**2])
    np.testing.assert_allclose(compensate_scale(big, d, W), big, atol=1e-15)
    R = np.array([[math.cos(0.4), -math.sin(0.4)], [math.sin(0.4), math.cos(0.4)]])
    cov = R @ np.diag([1e-8, 0.25]) @ R.T
    out = compensate_scale(cov, d, W)
    ev, vec = np.linalg.eigh(out)
    np.testing.assert_allclose(ev, [s**2, 0.25], rtol=1e-9)
    np.testing.assert_allclose(np.abs(vec.T @ R), np.eye(2), atol=1e-9)


def test_compensate_rejects_bad_input():
    with pytest.raises(ValueError):
        compensate_scale(np.diag([-1.0, 1.0]), 10, 900)
    with pytest.raises(ValueError):
        compensate_scale(np.eye(2), 0, 900)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, math.pi), st.floats(-9, 0), st.floats(-9, 0), st.floats(1.0, 200.0))
def test_compensate_idempotent_and_monotone(angle, l1, l2, d):
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    cov = R @ np.diag([10**l1, 10**l2]) @ R.T
    once = compensate_scale(cov, d, 900)
    twice = compensate_scale(once, d, 900)
    np.testing.assert_allclose(twice, once, rtol=1e-9, atol=1e-15)
    e0, e1 = np.linalg.eigvalsh(cov), np.linalg.eigvalsh(once)
    assert np.all(e1 >= e0 - 1e-12 * max(1.0, e0.max()))


def test_single_opaque_splat_on_beam():
    spec = LidarSpec.uniform()
    g = on_beam(spec, 10, 123, 20.0, sigma=0.01)
    ri = rasterize_lidar(SplatModel.from_gaussians([g]), I, spec, early_stop=0.0)
    assert float(ri.ranges[10, 123]) == pytest.approx(20.0, abs=1e-9)
    assert float(ri.uncertainty[10, 123]) == pytest.approx(0.0, abs=1e-12)
    assert float(ri.opacity[10, 123]) == pytest.approx(0.998, abs=1e-3)
    assert bool(ri.valid[10, 123])
    g.lidar_vis_logit = -60.0
    ri = rasterize_lidar(SplatModel.from_gaussians([g]), I, spec)
    assert not ri.valid.any() and float(ri.opacity.max()) < 1e-20


def test_two_splats_on_one_ray():
    spec = LidarSpec.uniform()
    gs = [on_beam(spec, 5, 40, r, sigma=0.004, alpha=0.5, gamma=1 - 1e-12) for r in (2.0, 4.0)]
    ri = rasterize_lidar(SplatModel.from_gaussians(gs), I, spec, early_stop=0.0, compensate=False)
    assert float(ri.opacity[5, 40]) == pytest.approx(0.75, abs=1e-9)
    assert float(ri.ranges[5, 40]) == pytest.approx(8 / 3, abs=1e-9)
    assert float(ri.uncertainty[5, 40]) == pytest.approx(2 / 3, abs=1e-9)


def test_compensation_keeps_tiny_splat_visible():
    spec = LidarSpec.uniform()
    # a quarter bin off the ray center: an uncompensated splat this small misses the ray entirely
    g = on_beam(spec, 16, 300, 100.0, sigma=1e-4, alpha=0.99, gamma=0.99, col_offset=0.25)
    m = SplatModel.from_gaussians([g])
    assert float(rasterize_lidar(m, I, spec).opacity[16, 300]) >= 0.5
    assert float(rasterize_lidar(m, I, spec, compensate=False).opacity[16, 300]) < 0.01


def test_seam_is_continuous():
    spec = LidarSpec.uniform()
    g = on_beam(spec, 8, spec.azimuth_bins - 1, 10.0, sigma=0.05)
    g.mean = g.mean.copy()
    g.mean[:2] = 10.0 * math.cos(spec.inclinations[8]) * np.array([1.0, 0.0])  # exactly at azimuth 0
    ri = rasterize_lidar(SplatModel.from_gaussians([g]), I, spec)
    a, b = float(ri.opacity[8, 0]), float(ri.opacity[8, -1])
    assert a > 0.3 and a == pytest.approx(b, rel=1e-9)


def test_pole_splat_has_finite_gradients():
    spec = LidarSpec.uniform()
    m = SplatModel.from_gaussians([on_beam(spec, 3, 3, 8.0), on_beam(spec, 3, 3, 1.0)])
    means = m.means.clone()
    means[1] = torch.tensor([0.0, 0.0, -1.8], dtype=torch.float64)
    means.requires_grad_()
    ri = rasterize_lidar(m.replace(means=means), I, spec)
    (ri.ranges.sum() + ri.opacity.sum()).backward()
    assert torch.isfinite(means.grad).all()


def test_uncertainty_filter():
    spec = LidarSpec.uniform()
    r = torch.full(spec.shape, 10.0, dtype=torch.float64)
    valid = torch.ones(spec.shape, dtype=torch.bool)
    unc = torch.zeros(spec.shape, dtype=torch.float64)
    unc[4, 7] = 30.0
    ri = RangeImage(r, valid, valid.to(torch.float64), unc, spec)
    assert len(range_to_pointcloud(ri, spec, math.inf)) == valid.sum()
    assert len(range_to_pointcloud(ri, spec, 1.0)) == valid.sum() - 1
    with pytest.raises(ValueError):
        range_to_pointcloud(ri, spec, 0.0)


def test_gradcheck_lidar_l1():
    spec = LidarSpec.uniform(beams=8, low_deg=-6, high_deg=6, azimuth_bins=64)
    g = torch.Generator().manual_seed(3)
    n = 10
    means = torch.randn(n, 3, generator=g, dtype=torch.float64) * torch.tensor([0.3, 1.0, 0.2], dtype=torch.float64)
    means[:, 0] += 6.0
    m = SplatModel(means=means, quats=torch.randn(n, 4, generator=g, dtype=torch.float64),
                   log_scales=torch.full((n, 3), -1.2, dtype=torch.float64) + 0.2 * torch.randn(n, 3, generator=g, dtype=torch.float64),
                   opacity_logits=torch.randn(n, generator=g, dtype=torch.float64),
                   sh=torch.zeros(n, 1, 3, dtype=torch.float64),
                   lidar_vis_logits=torch.randn(n, generator=g, dtype=torch.float64))
    target = torch.rand(spec.shape, generator=g, dtype=torch.float64) + 5.5
    names = ("means", "log_scales", "opacity_logits", "lidar_vis_logits")
    leaves = [getattr(m, k).clone().requires_grad_() for k in names]

    def f(*xs):
        ri = rasterize_lidar(m.replace(**dict(zip(names, xs))), I, spec, early_stop=0.0, cutoff=1e-30)
        return (ri.ranges - target).abs().mul(ri.opacity).sum() + ri.uncertainty.sum()

    assert torch.autograd.gradcheck(f, leaves, eps=1e-6, atol=1e-6, rtol=1e-3)


def test_spec_validation():
    with pytest.raises(ValueError):
        LidarSpec(np.array([0.0]), 900)
    with pytest.raises(ValueError):
        LidarSpec(np.array([0.0, 0.1, 0.05]), 900)
    with pytest.raises(ValueError):
        LidarSpec(np.array([0.0, 0.1]), 4)
