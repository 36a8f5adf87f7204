"""Slow, obviously-correct reference implementations used as ground truth.

Everything here is written with explicit Python loops and plain accumulation
in ascending index order. None of these functions call the vectorized paths
they are used to validate.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import ConfigError, ShapeError


def window_block_mask(grid) -> np.ndarray:
    """Boolean (M, M) mask over raster-ordered tokens: key j is visible to
    query i iff both lie in the same window of the grid. Encodes window
    locality as a mask over full attention."""
    t, h, w = grid.map_extent
    wt, wh, ww = grid.window_extent
    _, nh, nw = grid.windows_per_axis
    ti, hi, wi = np.indices((t, h, w))
    ids = ((ti // wt) * nh * nw + (hi // wh) * nw + (wi // ww)).reshape(-1)
    return ids[:, None] == ids[None, :]


def full_attention_ref(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Triple-loop softmax(q kT / sqrt(d)) v. No projections, no mask."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("full_attention_ref expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"inconsistent extents: q {q.shape}, k {k.shape}, v {v.shape}")
    nq, d = q.shape
    nk = k.shape[0]
    dv = v.shape[1]
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((nq, dv), dtype=np.float64)
    scores = np.zeros(nk, dtype=np.float64)
    for i in range(nq):
        for j in range(nk):
            s = 0.0
            for t in range(d):
                s += q[i, t] * k[j, t]
            scores[j] = s * scale
        m = scores[0]
        for j in range(1, nk):
            if scores[j] > m:
                m = scores[j]
        total = 0.0
        for j in range(nk):
            scores[j] = math.exp(scores[j] - m)
            total += scores[j]
        for j in range(nk):
            wj = scores[j] / total
            for t in range(dv):
                out[i, t] += wj * v[j, t]
    return out


def masked_attention_ref(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                         allowed: np.ndarray) -> np.ndarray:
    """Full attention with softmax restricted to allowed (query, key) pairs.

    Disallowed scores are treated as -inf; their dot products are never
    evaluated. Every query row must have at least one visible key.
    """
    nq, d = q.shape
    nk = k.shape[0]
    dv = v.shape[1]
    if allowed.shape != (nq, nk):
        raise ShapeError(
            f"mask shape {allowed.shape} does not match ({nq}, {nk})")
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((nq, dv), dtype=np.float64)
    for i in range(nq):
        visible = [j for j in range(nk) if allowed[i, j]]
        if not visible:
            raise ConfigError(f"mask row {i} has no visible keys")
        scores = []
        for j in visible:
            s = 0.0
            for t in range(d):
                s += q[i, t] * k[j, t]
            scores.append(s * scale)
        m = max(scores)
        weights = [math.exp(s - m) for s in scores]
        total = sum(weights)
        for wj, j in zip(weights, visible):
            wj /= total
            for t in range(dv):
                out[i, t] += wj * v[j, t]
    return out


def adaptive_avg_pool3d_ref(x: np.ndarray, target: tuple[int, int, int]
                            ) -> np.ndarray:
    """Mean over each non-overlapping region of a (T, H, W, C) map.

    The target grid must divide the map extents exactly.
    """
    t, h, w, c = x.shape
    k1, k2, k3 = target
    for size, k, axis in ((t, k1, "time"), (h, k2, "height"), (w, k3, "width")):
        if k < 1 or size % k != 0:
            raise ShapeError(
                f"pool target {k} does not divide {axis} extent {size}")
    rt, rh, rw = t // k1, h // k2, w // k3
    out = np.zeros((k1, k2, k3, c), dtype=np.float64)
    for a in range(k1):
        for b in range(k2):
            for g in range(k3):
                region = x[a * rt:(a + 1) * rt,
                           b * rh:(b + 1) * rh,
                           g * rw:(g + 1) * rw, :]
                out[a, b, g] = region.reshape(-1, c).mean(axis=0)
    return out


def conv2d_ref(x: np.ndarray, kernel: np.ndarray,
               stride: tuple[int, int] = (1, 1)) -> np.ndarray:
    """Naive 2D cross-correlation of x (H, W, Cin) with kernel (kh, kw, Cin, Cout)."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d_ref expects (H, W, Cin) and (kh, kw, Cin, Cout), got "
            f"{x.shape} and {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise ShapeError(f"input has {cin} channels, kernel expects {kcin}")
    sh, sw = stride
    if (h - kh) % sh != 0 or (w - kw) % sw != 0 or h < kh or w < kw:
        raise ShapeError(
            f"conv2d_ref output extent is not integral for input {x.shape}, "
            f"kernel {kernel.shape}, stride {stride}")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((oh, ow, cout), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            for co in range(cout):
                s = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            s += x[i * sh + di, j * sw + dj, ci] \
                                * kernel[di, dj, ci, co]
                out[i, j, co] = s
    return out
