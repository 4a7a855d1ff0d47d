"""Slow reference implementations used to certify the fast paths.

Everything here is double precision, loop-based, and free of tiling,
culling and early termination.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def _falloff(mean, cov, dx):
    """exp(-q/2) for offsets ``dx`` [..., 2] against one 2D Gaussian."""
    cov = np.asarray(cov, dtype=np.float64)
    inv = np.linalg.inv(cov)
    q = inv[0, 0] * dx[..., 0] ** 2 + 2 * inv[0, 1] * dx[..., 0] * dx[..., 1] + inv[1, 1] * dx[..., 1] ** 2
    return np.exp(-0.5 * q)


def oracle_composite_pixel(splats: Sequence, pixel, background=None):
    """Composite depth-sorted projected splats at one pixel.

    Each splat needs ``mean2d``, ``cov2d``, ``alpha``, ``color`` and ``depth``
    in the same 2D frame as ``pixel``. Returns (color, depth, opacity,
    variance) where depth is the raw weighted sum and variance the
    unnormalized weighted depth variance computed in two passes.
    """
    p = np.asarray(pixel, dtype=np.float64)
    n_ch = len(np.atleast_1d(splats[0].color)) if splats else 3
    color = np.zeros(n_ch)
    depth = 0.0
    T = 1.0
    weights, depths = [], []
    for s in splats:
        a = s.alpha * float(_falloff(s.mean2d, s.cov2d, p - np.asarray(s.mean2d, dtype=np.float64)))
        w = a * T
        color = color + w * np.asarray(s.color, dtype=np.float64)
        depth += w * s.depth
        weights.append(w)
        depths.append(s.depth)
        T *= 1.0 - a
    if background is not None:
        color = color + T * np.asarray(background, dtype=np.float64)
    _, var = two_pass_weighted_variance(weights, depths)
    return color, depth, float(sum(weights)), var


def oracle_composite_image(means2d, covs2d, alphas, features, depths, pixels, background=None, wrap=None):
    """Vectorized-over-pixels brute-force composite.

    Splats are taken in order of ascending ``depths`` (stable). ``pixels`` is
    [P, 2] in the splat frame. With ``wrap`` set, the second coordinate is
    periodic with that period and offsets use the shortest signed distance.
    Returns (features [P, F], opacity [P], mean [P], variance [P]) where
    mean/variance describe ``depths`` under the compositing weights.
    """
    means2d = np.asarray(means2d, dtype=np.float64)
    covs2d = np.asarray(covs2d, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    features = features.reshape(len(alphas), -1) if features.ndim != 2 else features
    depths = np.asarray(depths, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    P = pixels.shape[0]
    T = np.ones(P)
    out = np.zeros((P, features.shape[1]))
    w_all = []
    for i in np.argsort(depths, kind="stable"):
        dx = pixels - means2d[i]
        if wrap is not None:
            dx[:, 1] = (dx[:, 1] + 0.5 * wrap) % wrap - 0.5 * wrap
        a = alphas[i] * _falloff(means2d[i], covs2d[i], dx)
        w = a * T
        out += w[:, None] * features[i]
        w_all.append((w, depths[i]))
        T = T * (1.0 - a)
    if background is not None:
        out += T[:, None] * np.asarray(background, dtype=np.float64)
    lam = np.zeros(P)
    s1 = np.zeros(P)
    for w, d in w_all:
        lam += w
        s1 += w * d
    mean = np.divide(s1, lam, out=np.zeros(P), where=lam > 0)
    var = np.zeros(P)
    for w, d in w_all:
        var += w * (d - mean) ** 2
    return out, lam, mean, var


def two_pass_weighted_variance(weights, values) -> tuple[float, float]:
    """(weighted mean, sum_i w_i (x_i - mean)^2), computed in two passes."""
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(values, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0, 0.0
    mean = float((w * x).sum() / total)
    return mean, float((w * (x - mean) ** 2).sum())


def numeric_jacobian(f: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, one column per input coordinate."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        cols.append((np.asarray(f(x + e), dtype=np.float64) - np.asarray(f(x - e), dtype=np.float64)) / (2 * h))
    return np.stack(cols, axis=-1)


def finite_diff_grad(loss: Callable, params, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar ``loss`` over a flat parameter vector."""
    x = np.array(params, dtype=np.float64).reshape(-1)
    g = np.zeros_like(x)
    for k in range(x.size):
        old = x[k]
        x[k] = old + h
        fp = float(loss(x.copy()))
        x[k] = old - h
        fm = float(loss(x.copy()))
        x[k] = old
        g[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|); NaN where both magnitudes are below ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(scale >= floor, np.abs(a - b) / scale, math.nan)
