"""Tile-binned front-to-back alpha compositing with an analytic backward pass.

Both sensors share this engine. Splats arrive already projected onto a 2D
grid as (mean, covariance, opacity, per-splat features) plus a sort key;
the pixel at (row i, col j) is evaluated at coordinates
``(i + row_offset, j + col_offset)``.

Per pixel the engine produces ``sum_i w_i f_i`` for every feature channel,
the accumulated weight ``sum_i w_i`` and, optionally, the running weighted
mean and unnormalized weighted variance of one channel, where
``w_i = a_i * prod_{j<i} (1 - a_j)``.

Gradients are accumulated into one slot per (tile, splat) pair and then
reduced in pair order, so the backward pass is deterministic regardless of
how tiles are scheduled.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba
import numpy as np
import torch
from numba import prange
from torch import Tensor

from .core import DTYPE

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

DEFAULT_TILE = 8
DEFAULT_CUTOFF = 1e-12
DEFAULT_EARLY_STOP = 1e-4


@dataclass(frozen=True)
class Grid:
    height: int
    width: int
    row_offset: float = 0.5
    col_offset: float = 0.5
    tile: int = DEFAULT_TILE

    @property
    def tiles_rows(self) -> int:
        return -(-self.height // self.tile)

    @property
    def tiles_cols(self) -> int:
        return -(-self.width // self.tile)


@numba.njit(cache=True)
def _bin_tiles(order, means, ext, H, W, ts, row_off, col_off):
    n_tc = (W + ts - 1) // ts
    n_tiles = ((H + ts - 1) // ts) * n_tc
    rects = np.empty((order.shape[0], 4), dtype=np.int64)
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        s = order[k]
        r0 = max(int(math.ceil(means[s, 0] - ext[s, 0] - row_off)), 0)
        r1 = min(int(math.floor(means[s, 0] + ext[s, 0] - row_off)), H - 1)
        c0 = max(int(math.ceil(means[s, 1] - ext[s, 1] - col_off)), 0)
        c1 = min(int(math.floor(means[s, 1] + ext[s, 1] - col_off)), W - 1)
        if r0 > r1 or c0 > c1:
            rects[k, 0] = 1
            rects[k, 1] = 0
            continue
        rects[k, 0] = r0 // ts
        rects[k, 1] = r1 // ts
        rects[k, 2] = c0 // ts
        rects[k, 3] = c1 // ts
        for tr in range(rects[k, 0], rects[k, 1] + 1):
            for tc in range(rects[k, 2], rects[k, 3] + 1):
                counts[tr * n_tc + tc + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    start = counts.copy()
    fill = counts[:-1].copy()
    ids = np.empty(counts[n_tiles], dtype=np.int64)
    for k in range(order.shape[0]):
        for tr in range(rects[k, 0], rects[k, 1] + 1):
            for tc in range(rects[k, 2], rects[k, 3] + 1):
                t = tr * n_tc + tc
                ids[fill[t]] = order[k]
                fill[t] += 1
    return start, ids


@numba.njit(parallel=True, cache=True)
def _forward(means, conics, alphas, qmax, feats, bg, start, ids, H, W, ts, row_off, col_off, early_stop, wch):
    F = feats.shape[1]
    n_tc = (W + ts - 1) // ts
    n_tiles = ((H + ts - 1) // ts) * n_tc
    out_f = np.zeros((H, W, F))
    out_lam = np.zeros((H, W))
    out_m = np.zeros((H, W))
    out_v = np.zeros((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    for t in prange(n_tiles):
        tr = t // n_tc
        tc = t - tr * n_tc
        for i in range(tr * ts, min(tr * ts + ts, H)):
            pr = i + row_off
            for j in range(tc * ts, min(tc * ts + ts, W)):
                pc = j + col_off
                T = 1.0
                lam = 0.0
                m = 0.0
                v = 0.0
                n = 0
                for k in range(start[t], start[t + 1]):
                    s = ids[k]
                    dr = pr - means[s, 0]
                    dc = pc - means[s, 1]
                    q = conics[s, 0] * dr * dr + 2.0 * conics[s, 1] * dr * dc + conics[s, 2] * dc * dc
                    if q > qmax[s]:
                        continue
                    a = alphas[s] * math.exp(-0.5 * q)
                    w = a * T
                    for f in range(F):
                        out_f[i, j, f] += w * feats[s, f]
                    lam_prev = lam
                    lam += w
                    if wch >= 0 and lam > 0.0:
                        delta = feats[s, wch] - m
                        m += (w / lam) * delta
                        v += w * (lam_prev / lam) * delta * delta
                    T *= 1.0 - a
                    n = k - start[t] + 1
                    if T < early_stop:
                        break
                for f in range(F):
                    out_f[i, j, f] += T * bg[f]
                out_lam[i, j] = lam
                out_m[i, j] = m
                out_v[i, j] = v
                n_contrib[i, j] = n
    return out_f, out_lam, out_m, out_v, n_contrib


@numba.njit(parallel=True, cache=True)
def _backward(
    means, conics, alphas, qmax, feats, bg, start, ids, H, W, ts, row_off, col_off, wch,
    out_lam, out_m, n_contrib, g_f, g_lam, g_m, g_v,
):
    F = feats.shape[1]
    n_tc = (W + ts - 1) // ts
    n_tiles = ((H + ts - 1) // ts) * n_tc
    # per pair: d mean (2), d conic (3), d alpha, d feats (F)
    buf = np.zeros((ids.shape[0], 6 + F))
    for t in prange(n_tiles):
        tr = t // n_tc
        tc = t - tr * n_tc
        cap = start[t + 1] - start[t]
        ap = np.empty(cap)
        tt = np.empty(cap)
        for i in range(tr * ts, min(tr * ts + ts, H)):
            pr = i + row_off
            for j in range(tc * ts, min(tc * ts + ts, W)):
                pc = j + col_off
                n = n_contrib[i, j]
                T = 1.0
                for k in range(n):
                    s = ids[start[t] + k]
                    dr = pr - means[s, 0]
                    dc = pc - means[s, 1]
                    q = conics[s, 0] * dr * dr + 2.0 * conics[s, 1] * dr * dc + conics[s, 2] * dc * dc
                    ap[k] = alphas[s] * math.exp(-0.5 * q) if q <= qmax[s] else 0.0
                    tt[k] = T
                    T *= 1.0 - ap[k]
                lam = out_lam[i, j]
                m = out_m[i, j]
                B = 0.0
                for f in range(F):
                    B += g_f[i, j, f] * bg[f]
                for k in range(n - 1, -1, -1):
                    p = start[t] + k
                    s = ids[p]
                    w = ap[k] * tt[k]
                    g = g_lam[i, j]
                    for f in range(F):
                        g += g_f[i, j, f] * feats[s, f]
                        buf[p, 6 + f] += g_f[i, j, f] * w
                    if wch >= 0 and lam > 0.0:
                        dd = feats[s, wch] - m
                        g += g_m[i, j] * dd / lam + g_v[i, j] * dd * dd
                        buf[p, 6 + wch] += g_m[i, j] * w / lam + 2.0 * g_v[i, j] * w * dd
                    d_ap = tt[k] * (g - B)
                    B = g * ap[k] + (1.0 - ap[k]) * B
                    if ap[k] == 0.0:
                        continue
                    dr = pr - means[s, 0]
                    dc = pc - means[s, 1]
                    G = ap[k] / alphas[s]
                    d_q = -0.5 * ap[k] * d_ap
                    buf[p, 0] -= d_q * 2.0 * (conics[s, 0] * dr + conics[s, 1] * dc)
                    buf[p, 1] -= d_q * 2.0 * (conics[s, 1] * dr + conics[s, 2] * dc)
                    buf[p, 2] += d_q * dr * dr
                    buf[p, 3] += d_q * 2.0 * dr * dc
                    buf[p, 4] += d_q * dc * dc
                    buf[p, 5] += d_ap * G
    return buf


@numba.njit(cache=True)
def _reduce(buf, ids, N):
    out = np.zeros((N, buf.shape[1]))
    for p in range(ids.shape[0]):
        s = ids[p]
        for c in range(buf.shape[1]):
            out[s, c] += buf[p, c]
    return out


@dataclass
class Plan:
    grid: Grid
    start: np.ndarray
    ids: np.ndarray
    background: np.ndarray
    early_stop: float
    welford_channel: int
    qmax: np.ndarray  # per-splat Mahalanobis radius beyond which alpha * falloff < cutoff


def _np(x: Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.detach().numpy(), dtype=np.float64)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, alphas, feats, plan: Plan):
        g = plan.grid
        arrays = (_np(means2d), _np(conics), _np(alphas), _np(feats))
        out_f, lam, m, v, n = _forward(
            *arrays[:3], plan.qmax, arrays[3], plan.background, plan.start, plan.ids, g.height, g.width, g.tile,
            g.row_offset, g.col_offset, plan.early_stop, plan.welford_channel,
        )
        ctx.plan = plan
        ctx.arrays = arrays
        ctx.state = (lam, m, n)
        return tuple(torch.from_numpy(x) for x in (out_f, lam, m, v))

    @staticmethod
    def backward(ctx, g_f, g_lam, g_m, g_v):
        plan = ctx.plan
        g = plan.grid
        means, conics, alphas, feats = ctx.arrays
        lam, m, n = ctx.state
        H, W, F = g.height, g.width, feats.shape[1]

        def dense(x, shape):
            return np.zeros(shape) if x is None else _np(x)

        buf = _backward(
            means, conics, alphas, plan.qmax, feats, plan.background, plan.start, plan.ids, H, W, g.tile,
            g.row_offset, g.col_offset, plan.welford_channel, lam, m, n,
            dense(g_f, (H, W, F)), dense(g_lam, (H, W)), dense(g_m, (H, W)), dense(g_v, (H, W)),
        )
        red = torch.from_numpy(_reduce(buf, plan.ids, means.shape[0]))
        return red[:, 0:2], red[:, 2:5], red[:, 5], red[:, 6:], None


@dataclass
class Composite:
    """Per-pixel outputs of :func:`composite`, each [H, W] (features [H, W, F])."""

    features: Tensor
    opacity: Tensor
    mean: Tensor
    variance: Tensor
    transmittance_stop: float


def conics_of(covs2d: Tensor) -> Tensor:
    """Upper triangle (a, b, c) of the inverse of [N, 2, 2] covariances."""
    a, b, c = covs2d[:, 0, 0], covs2d[:, 0, 1], covs2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def footprint_extent(covs2d: np.ndarray, alphas: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned half extents outside of which alpha falloff is below ``cutoff``."""
    keep = alphas > cutoff
    k = np.sqrt(2.0 * np.log(np.where(keep, alphas, 1.0) / cutoff))
    ext = k[:, None] * np.sqrt(np.stack([covs2d[:, 0, 0], covs2d[:, 1, 1]], axis=-1))
    return ext, keep


def composite(
    means2d: Tensor,
    covs2d: Tensor,
    alphas: Tensor,
    feats: Tensor,
    sort_key: Tensor,
    grid: Grid,
    *,
    valid: Tensor | None = None,
    background=None,
    welford_channel: int = -1,
    early_stop: float = DEFAULT_EARLY_STOP,
    cutoff: float = DEFAULT_CUTOFF,
) -> Composite:
    """Front-to-back composite of projected splats onto ``grid``.

    Splats are sorted once by ``sort_key`` (stable) and binned into tiles by
    the footprint in which ``alpha * falloff >= cutoff``; compositing stops
    once transmittance drops below ``early_stop`` (0 disables).
    """
    N, F = feats.shape
    cov_np = _np(covs2d)
    a_np = _np(alphas)
    with np.errstate(divide="ignore"):
        ext, keep = footprint_extent(cov_np, a_np, cutoff) if N else (np.zeros((0, 2)), np.zeros(0, bool))
    # a zero cutoff means unbounded footprints: every splat reaches every tile
    ext = np.where(np.isposinf(ext), float(grid.height + grid.width + 1), ext)
    if valid is not None:
        keep &= valid.detach().numpy().astype(bool)
    keep &= np.all(np.isfinite(ext), axis=1)
    idx = np.nonzero(keep)[0]
    order = idx[np.argsort(_np(sort_key)[idx], kind="stable")].astype(np.int64)
    start, ids = _bin_tiles(
        order, _np(means2d).reshape(-1, 2), ext, grid.height, grid.width, grid.tile,
        grid.row_offset, grid.col_offset,
    )
    bg = np.zeros(F) if background is None else np.asarray(background, dtype=np.float64).reshape(F)
    with np.errstate(divide="ignore"):
        qmax = 2.0 * np.log(a_np / cutoff) if cutoff > 0 else np.full(N, np.inf)
    plan = Plan(grid, start, ids, bg, float(early_stop), int(welford_channel), qmax)
    if N == 0:
        means2d = torch.zeros((0, 2), dtype=DTYPE)
        conics = torch.zeros((0, 3), dtype=DTYPE)
    else:
        # culled splats never reach the kernel; keep their conics finite
        safe = torch.where(torch.as_tensor(keep)[:, None, None], covs2d, torch.eye(2, dtype=DTYPE))
        conics = conics_of(safe)
    out_f, lam, m, v = _Composite.apply(means2d, conics, alphas, feats, plan)
    return Composite(out_f, lam, m, v, early_stop)
