import numpy as np
import pytest
from types import SimpleNamespace

from splatlidar.oracle import (
    finite_diff_grad, numeric_jacobian, oracle_composite_image, oracle_composite_pixel, relative_error,
    two_pass_weighted_variance,
)


def splat(mean, alpha, color, depth, cov=((1.0, 0.0), (0.0, 1.0))):
    return SimpleNamespace(mean2d=np.array(mean, float), cov2d=np.array(cov), alpha=alpha,
                           color=np.array(color, float), depth=depth)


def test_no_splats_gives_background():
    c, d, o, v = oracle_composite_pixel([], (0.5, 0.5), background=[0.2, 0.3, 0.4])
    np.testing.assert_array_equal(c, [0.2, 0.3, 0.4])
    assert (d, o, v) == (0.0, 0.0, 0.0)


def test_opaque_centered_splat():
    c, d, o, v = oracle_composite_pixel([splat((2, 2), 1.0, [0.1, 0.6, 0.9], 7.0)], (2, 2), background=[1, 1, 1])
    np.testing.assert_array_equal(c, [0.1, 0.6, 0.9])
    assert (d, o, v) == (7.0, 1.0, 0.0)


def test_two_splats_by_hand():
    s = [splat((0, 0), 0.5, [1, 0, 0], 2.0), splat((0, 0), 0.5, [0, 1, 0], 4.0)]
    c, d, o, v = oracle_composite_pixel(s, (0, 0))
    np.testing.assert_allclose(c, [0.5, 0.25, 0])
    assert d == pytest.approx(0.5 * 2 + 0.25 * 4)
    assert o == pytest.approx(0.75)
    mean = (0.5 * 2 + 0.25 * 4) / 0.75
    assert v == pytest.approx(0.5 * (2 - mean) ** 2 + 0.25 * (4 - mean) ** 2)


def test_image_oracle_agrees_with_pixel_oracle(rng):
    n = 12
    means = rng.uniform(0, 8, (n, 2))
    A = rng.normal(size=(n, 2, 2))
    covs = A @ A.transpose(0, 2, 1) + 0.3 * np.eye(2)
    alphas = rng.uniform(0.1, 0.9, n)
    colors = rng.uniform(size=(n, 3))
    depths = rng.uniform(1, 10, n)
    pix = rng.uniform(0, 8, (20, 2))
    img, lam, mean, var = oracle_composite_image(means, covs, alphas, colors, depths, pix, background=[0, 0, 1])
    order = np.argsort(depths)
    for p in range(len(pix)):
        c, d, o, v = oracle_composite_pixel(
            [splat(means[i], alphas[i], colors[i], depths[i], covs[i]) for i in order], pix[p], background=[0, 0, 1])
        np.testing.assert_allclose(img[p], c, atol=1e-14)
        assert lam[p] == pytest.approx(o, abs=1e-14)
        assert mean[p] * lam[p] == pytest.approx(d, abs=1e-12)
        assert var[p] == pytest.approx(v, abs=1e-12)


def test_wrap_uses_shortest_offset():
    a = oracle_composite_image([[0.0, 0.5]], [np.eye(2)], [0.8], [[1.0]], [1.0], [[0.0, 9.5]], wrap=10.0)
    b = oracle_composite_image([[0.0, 0.5]], [np.eye(2)], [0.8], [[1.0]], [1.0], [[0.0, -0.5]])
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-15)


def test_two_pass_variance():
    assert two_pass_weighted_variance([], []) == (0.0, 0.0)
    m, v = two_pass_weighted_variance([1, 1], [1, 3])
    assert (m, v) == (2.0, 2.0)


def test_numeric_jacobian_identity_and_linear(rng):
    x = rng.normal(size=5)
    np.testing.assert_allclose(numeric_jacobian(lambda z: z, x), np.eye(5), atol=1e-9)
    A = rng.normal(size=(3, 5))
    np.testing.assert_allclose(numeric_jacobian(lambda z: A @ z, x), A, atol=1e-8)


def test_finite_diff_grad(rng):
    x = rng.normal(size=7)
    np.testing.assert_allclose(finite_diff_grad(lambda z: 0.5 * z @ z, x), x, atol=1e-9)
    np.testing.assert_array_equal(finite_diff_grad(lambda z: 3.0, x), np.zeros(7))
    before = x.copy()
    finite_diff_grad(lambda z: z.sum(), x)
    np.testing.assert_array_equal(x, before)


def test_oracles_are_repeatable(rng):
    args = (rng.uniform(0, 4, (5, 2)), [np.eye(2)] * 5, rng.uniform(size=5), rng.uniform(size=(5, 3)),
            rng.uniform(1, 3, 5), rng.uniform(0, 4, (9, 2)))
    a, b = oracle_composite_image(*args), oracle_composite_image(*args)
    for u, w in zip(a, b):
        assert np.array_equal(u, w)


def test_relative_error():
    r = relative_error([1.0, 0.0, 2.0], [1.5, 0.0, -2.0])
    assert r[0] == pytest.approx(1 / 3) and np.isnan(r[1]) and r[2] == 2.0
