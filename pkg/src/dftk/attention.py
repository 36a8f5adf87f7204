"""The two attention mechanisms and their plumbing.

A block stratifies space-time attention into two cascaded sub-layers:

* local window attention ("lw"): full multi-head attention restricted to
  non-overlapping (t, h, w) windows of the token map;
* global pyramid attention ("gp"): cross-attention from every token to a
  small set of pooled global priors produced by strided depth-wise
  convolutions at several pyramid scales.

Both sub-layers follow the pre-LN transformer recipe: x' = x + MSA(LN(x)),
y = x' + MLP(LN(x')). The position encoding generator ("peg") is a residual
depth-wise 3x3x3 convolution inserted between the two sub-layers in the
first block of each stage.

Each sub-layer also has a hand-written backward pass (used by the gradient
checks); the forward-mode arbiter lives in numerics.finite_diff_grad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConfigError,
    ConvKernel3D,
    ShapeError,
    depthwise_conv3d,
    depthwise_conv3d_vjp,
    gelu,
    gelu_vjp,
    layer_norm,
    layer_norm_vjp,
    linear,
    linear_vjp,
    softmax_rows,
    softmax_rows_vjp,
    trunc_normal,
)

# Sentinel pyramid scale: the prior grid takes the full feature-map extent.
WHOLE = "whole"

MLP_EXPANSION = 4


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

_AXES = ("time", "height", "width")


@dataclass(frozen=True)
class WindowGrid:
    """Partition of a (T, H, W) token map into non-overlapping windows."""

    map_extent: tuple[int, int, int]
    window_extent: tuple[int, int, int]

    def __post_init__(self):
        for size, win, axis in zip(self.map_extent, self.window_extent, _AXES):
            if win < 1 or size < 1:
                raise ShapeError(f"extents must be >= 1 along {axis}")
            if size % win != 0:
                raise ShapeError(
                    f"window extent {win} does not divide map extent {size} "
                    f"along {axis}")

    @property
    def windows_per_axis(self) -> tuple[int, int, int]:
        return tuple(m // w for m, w in zip(self.map_extent, self.window_extent))

    @property
    def window_count(self) -> int:
        a, b, c = self.windows_per_axis
        return a * b * c

    @property
    def tokens_per_window(self) -> int:
        t, h, w = self.window_extent
        return t * h * w

    @property
    def token_count(self) -> int:
        t, h, w = self.map_extent
        return t * h * w


@dataclass(frozen=True)
class PyramidSpec:
    """Ordered list of global-prior scales; entries are (k1, k2, k3) grids or
    the WHOLE sentinel (grid == feature-map extent)."""

    scales: tuple

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("pyramid needs at least one scale")
        norm = []
        for s in self.scales:
            if s == WHOLE:
                norm.append(WHOLE)
                continue
            s = tuple(int(k) for k in s)
            if len(s) != 3 or any(k < 1 for k in s):
                raise ConfigError(f"bad pyramid scale {s}")
            norm.append(s)
        object.__setattr__(self, "scales", tuple(norm))

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    def resolve(self, map_extent: tuple[int, int, int]) -> tuple:
        """Concrete (k1, k2, k3) per scale; WHOLE takes the map extent.
        Every scale must divide the map extents exactly."""
        out = []
        for s in self.scales:
            if s == WHOLE:
                out.append(tuple(map_extent))
                continue
            for k, size, axis in zip(s, map_extent, _AXES):
                if k > size or size % k != 0:
                    raise ShapeError(
                        f"pyramid scale {k} does not divide map extent {size} "
                        f"along {axis}")
            out.append(s)
        return tuple(out)

    def prior_count(self, map_extent: tuple[int, int, int]) -> int:
        """S: total number of pooled prior tokens across scales."""
        return sum(k1 * k2 * k3 for k1, k2, k3 in self.resolve(map_extent))


@dataclass
class GlobalPriors:
    """Concatenated pooled tokens (S, D) with the start offset of each scale."""

    tokens: np.ndarray
    per_scale_offsets: tuple[int, ...]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Weights of one attention sub-layer: QKV/out projections, the two layer
    norms and the 4x-expansion MLP."""

    heads: int
    q_weight: np.ndarray
    q_bias: np.ndarray
    k_weight: np.ndarray
    k_bias: np.ndarray
    v_weight: np.ndarray
    v_bias: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray
    ln1_gain: np.ndarray
    ln1_shift: np.ndarray
    ln2_gain: np.ndarray
    ln2_shift: np.ndarray
    mlp_in_weight: np.ndarray
    mlp_in_bias: np.ndarray
    mlp_out_weight: np.ndarray
    mlp_out_bias: np.ndarray

    def __post_init__(self):
        d = self.q_weight.shape[0]
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigError(
                f"feature dim {d} is not divisible by {self.heads} heads")
        if self.mlp_in_weight.shape != (d, MLP_EXPANSION * d):
            raise ShapeError(
                f"mlp_in weight {self.mlp_in_weight.shape} must be "
                f"({d}, {MLP_EXPANSION * d})")

    @property
    def dim(self) -> int:
        return self.q_weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def random(cls, dim: int, heads: int, rng: np.random.Generator,
               std: float = 0.02) -> "AttentionParams":
        hidden = MLP_EXPANSION * dim
        return cls(
            heads=heads,
            q_weight=trunc_normal(rng, (dim, dim), std),
            q_bias=np.zeros(dim),
            k_weight=trunc_normal(rng, (dim, dim), std),
            k_bias=np.zeros(dim),
            v_weight=trunc_normal(rng, (dim, dim), std),
            v_bias=np.zeros(dim),
            out_weight=trunc_normal(rng, (dim, dim), std),
            out_bias=np.zeros(dim),
            ln1_gain=np.ones(dim),
            ln1_shift=np.zeros(dim),
            ln2_gain=np.ones(dim),
            ln2_shift=np.zeros(dim),
            mlp_in_weight=trunc_normal(rng, (dim, hidden), std),
            mlp_in_bias=np.zeros(hidden),
            mlp_out_weight=trunc_normal(rng, (hidden, dim), std),
            mlp_out_bias=np.zeros(dim),
        )

    def zero_residual_outputs(self) -> "AttentionParams":
        """Copy with out-projection and the MLP output layer zeroed, which
        turns the sub-layer into an exact identity."""
        import copy
        p = copy.deepcopy(self)
        p.out_weight = np.zeros_like(p.out_weight)
        p.out_bias = np.zeros_like(p.out_bias)
        p.mlp_out_weight = np.zeros_like(p.mlp_out_weight)
        p.mlp_out_bias = np.zeros_like(p.mlp_out_bias)
        return p


@dataclass
class PegParams:
    """Depth-wise 3x3x3 residual convolution, stride 1, zero padding 1."""

    kernel: ConvKernel3D

    def __post_init__(self):
        if self.kernel.extent != (3, 3, 3) or self.kernel.stride != (1, 1, 1):
            raise ConfigError(
                f"peg kernel must be extent (3,3,3) stride (1,1,1), got "
                f"extent {self.kernel.extent} stride {self.kernel.stride}")

    @property
    def channels(self) -> int:
        return self.kernel.channels

    @classmethod
    def zeros(cls, channels: int) -> "PegParams":
        return cls(ConvKernel3D(
            weights=np.zeros((channels, 3, 3, 3)),
            stride=(1, 1, 1),
            bias=np.zeros(channels)))


def pyramid_factor_extents(scale: tuple[int, int, int],
                           map_extent: tuple[int, int, int]):
    """Factorized kernel extents for one scale: temporal (T/k1, 1, 1) then
    spatial (1, H/k2, W/k3); extent == stride (non-overlapping regions)."""
    t, h, w = map_extent
    k1, k2, k3 = scale
    return (t // k1, 1, 1), (1, h // k2, w // k3)


@dataclass
class PyramidKernels:
    """Per-scale factorized depth-wise kernel pairs (temporal, spatial)."""

    pairs: tuple

    @classmethod
    def averaging(cls, spec: PyramidSpec, map_extent, channels: int
                  ) -> "PyramidKernels":
        """Uniform-average weights (1 / own extent product per factor, zero
        bias), which makes the downsampler equal to adaptive average pooling."""
        pairs = []
        for scale in spec.resolve(map_extent):
            te, se = pyramid_factor_extents(scale, map_extent)
            pairs.append((
                ConvKernel3D(np.full((channels,) + te, 1.0 / math.prod(te)),
                             stride=te, bias=np.zeros(channels)),
                ConvKernel3D(np.full((channels,) + se, 1.0 / math.prod(se)),
                             stride=se, bias=np.zeros(channels)),
            ))
        return cls(tuple(pairs))

    @classmethod
    def random(cls, spec: PyramidSpec, map_extent, channels: int,
               rng: np.random.Generator, std: float = 0.02) -> "PyramidKernels":
        pairs = []
        for scale in spec.resolve(map_extent):
            te, se = pyramid_factor_extents(scale, map_extent)
            pairs.append((
                ConvKernel3D(trunc_normal(rng, (channels,) + te, std),
                             stride=te, bias=np.zeros(channels)),
                ConvKernel3D(trunc_normal(rng, (channels,) + se, std),
                             stride=se, bias=np.zeros(channels)),
            ))
        return cls(tuple(pairs))


# ---------------------------------------------------------------------------
# window partition / reverse
# ---------------------------------------------------------------------------

def window_partition(x: np.ndarray, grid: WindowGrid) -> np.ndarray:
    """(T, H, W, D) -> (nW, t*h*w, D). Window order is lexicographic in the
    window index, token order within a window lexicographic in local (t,h,w)."""
    if x.ndim != 4 or tuple(x.shape[:3]) != grid.map_extent:
        raise ShapeError(
            f"map {x.shape} does not match grid extent {grid.map_extent}")
    nt, nh, nw = grid.windows_per_axis
    t, h, w = grid.window_extent
    d = x.shape[3]
    parts = x.reshape(nt, t, nh, h, nw, w, d)
    parts = parts.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(parts.reshape(grid.window_count, t * h * w, d))


def window_reverse(windows: np.ndarray, grid: WindowGrid) -> np.ndarray:
    """Exact inverse of window_partition."""
    nt, nh, nw = grid.windows_per_axis
    t, h, w = grid.window_extent
    if windows.ndim != 3 or windows.shape[:2] != (grid.window_count,
                                                  grid.tokens_per_window):
        raise ShapeError(
            f"windows {windows.shape} do not match grid "
            f"({grid.window_count}, {grid.tokens_per_window}, D)")
    d = windows.shape[2]
    parts = windows.reshape(nt, nh, nw, t, h, w, d)
    parts = parts.transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(parts.reshape(grid.map_extent + (d,)))


# ---------------------------------------------------------------------------
# attention cores
# ---------------------------------------------------------------------------

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # (..., N, D) -> (..., heads, N, head_dim)
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    return np.moveaxis(x, -2, -3)

def _merge_heads(x: np.ndarray) -> np.ndarray:
    # (..., heads, N, head_dim) -> (..., N, heads*head_dim)
    x = np.moveaxis(x, -3, -2)
    *lead, n, heads, hd = x.shape
    return np.ascontiguousarray(x.reshape(*lead, n, heads * hd))


def multi_head_attention(q_src: np.ndarray, kv_src: np.ndarray,
                         p: AttentionParams, return_weights: bool = False):
    """Projected multi-head attention of q_src (Nq, D) against kv_src (Nk, D).

    Per head: softmax(Q K^T / sqrt(head_dim)) V; heads are concatenated and
    out-projected. No mask. With return_weights=True also returns the
    (heads, Nq, Nk) attention weights for introspection.
    """
    d = p.dim
    if q_src.ndim != 2 or kv_src.ndim != 2:
        raise ShapeError("attention sources must be 2-D token matrices")
    if q_src.shape[1] != d or kv_src.shape[1] != d:
        raise ShapeError(
            f"token dims {q_src.shape[1]}/{kv_src.shape[1]} do not match "
            f"params dim {d}")
    q = _split_heads(linear(q_src, p.q_weight, p.q_bias), p.heads)
    k = _split_heads(linear(kv_src, p.k_weight, p.k_bias), p.heads)
    v = _split_heads(linear(kv_src, p.v_weight, p.v_bias), p.heads)
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(p.head_dim)
    attn = softmax_rows(scores)
    ctx = _merge_heads(attn @ v)
    out = linear(ctx, p.out_weight, p.out_bias)
    if return_weights:
        return out, attn
    return out


def _attention_tail(tokens: np.ndarray, ctx: np.ndarray, p: AttentionParams,
                    counter, label: str):
    """Shared residual + MLP tail: x1 = tokens + out(ctx); y = x1 + MLP(LN(x1))."""
    n_tok = tokens.reshape(-1, p.dim).shape[0]
    att_out = linear(ctx, p.out_weight, p.out_bias)
    x1 = tokens + att_out
    x1n = layer_norm(x1, p.ln2_gain, p.ln2_shift)
    hidden = gelu(linear(x1n, p.mlp_in_weight, p.mlp_in_bias))
    y = x1 + linear(hidden, p.mlp_out_weight, p.mlp_out_bias)
    if counter is not None:
        d = p.dim
        counter.add(f"{label}.out", "projection", n_tok * d * d)
        counter.add(f"{label}.mlp", "mlp", 2 * MLP_EXPANSION * n_tok * d * d)
        # ln2 + gelu + the two residual adds
        counter.elementwise(n_tok * d + MLP_EXPANSION * n_tok * d
                            + 2 * n_tok * d)
    return y


def lw_msa_sublayer(x: np.ndarray, grid: WindowGrid, p: AttentionParams,
                    counter=None, label: str = "lw") -> np.ndarray:
    """Window-local attention sub-layer on a (T, H, W, D) map.

    Tokens in different windows never interact; output shape equals input.
    """
    if x.shape[-1] != p.dim:
        raise ShapeError(f"map channels {x.shape[-1]} != params dim {p.dim}")
    xw = window_partition(x, grid)              # (nW, n, D)
    n_win, n_tok, d = xw.shape
    m = n_win * n_tok
    xn = layer_norm(xw, p.ln1_gain, p.ln1_shift)
    q = _split_heads(linear(xn, p.q_weight, p.q_bias), p.heads)
    k = _split_heads(linear(xn, p.k_weight, p.k_bias), p.heads)
    v = _split_heads(linear(xn, p.v_weight, p.v_bias), p.heads)
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(p.head_dim)
    attn = softmax_rows(scores)                 # (nW, heads, n, n)
    ctx = _merge_heads(attn @ v)                # (nW, n, D)
    if counter is not None:
        counter.add(f"{label}.qkv", "projection", 3 * m * d * d)
        counter.add(f"{label}.attn_qk", "attention", m * n_tok * d)
        counter.add(f"{label}.attn_av", "attention", m * n_tok * d)
        counter.elementwise(m * d + n_win * p.heads * n_tok * n_tok)  # ln1 + softmax
    y = _attention_tail(xw, ctx, p, counter, label)
    return window_reverse(y, grid)


def pyramid_downsample(x: np.ndarray, spec: PyramidSpec,
                       kernels: PyramidKernels, counter=None,
                       label: str = "pool") -> GlobalPriors:
    """Pool a (T, H, W, D) map into multi-scale global priors.

    Each scale applies a temporal depth-wise conv (extent == stride == T/k1)
    followed by a spatial one (extent == stride == (H/k2, W/k3)); the
    (k1, k2, k3, D) results are flattened in raster order and concatenated in
    scale order.
    """
    t, h, w, d = x.shape
    resolved = spec.resolve((t, h, w))
    if len(kernels.pairs) != len(resolved):
        raise ShapeError(
            f"{len(kernels.pairs)} kernel pairs for {len(resolved)} scales")
    blocks, offsets, macs = [], [], 0
    total = 0
    for scale, (k_time, k_space) in zip(resolved, kernels.pairs):
        te, se = pyramid_factor_extents(scale, (t, h, w))
        if k_time.extent != te or k_time.stride != te:
            raise ShapeError(
                f"temporal kernel extent/stride {k_time.extent}/{k_time.stride} "
                f"!= required {te} for scale {scale}")
        if k_space.extent != se or k_space.stride != se:
            raise ShapeError(
                f"spatial kernel extent/stride {k_space.extent}/{k_space.stride} "
                f"!= required {se} for scale {scale}")
        mid = depthwise_conv3d(x, k_time)       # (k1, H, W, D)
        pooled = depthwise_conv3d(mid, k_space)  # (k1, k2, k3, D)
        offsets.append(total)
        total += pooled.shape[0] * pooled.shape[1] * pooled.shape[2]
        blocks.append(pooled.reshape(-1, d))
        macs += t * h * w * d + scale[0] * h * w * d
    if counter is not None:
        counter.add(label, "conv", macs)
    return GlobalPriors(tokens=np.concatenate(blocks, axis=0),
                        per_scale_offsets=tuple(offsets))


def gp_msa_sublayer(x: np.ndarray, spec: PyramidSpec, kernels: PyramidKernels,
                    p: AttentionParams, priors: GlobalPriors | None = None,
                    counter=None, label: str = "gp",
                    return_internals: bool = False):
    """Global pyramid attention sub-layer on a (T, H, W, D) map.

    Keys/values are the pooled priors of the LN-normalized input (the same
    tensor that feeds the query projection); every token is a query. An
    explicit `priors` argument skips the pooling (used by locality tests).
    """
    t, h, w, d = x.shape
    if d != p.dim:
        raise ShapeError(f"map channels {d} != params dim {p.dim}")
    m = t * h * w
    xf = x.reshape(m, d)
    xn = layer_norm(xf, p.ln1_gain, p.ln1_shift)
    if priors is None:
        priors = pyramid_downsample(xn.reshape(t, h, w, d), spec, kernels,
                                    counter, f"{label}.pool")
    s = priors.tokens.shape[0]
    q = _split_heads(linear(xn, p.q_weight, p.q_bias), p.heads)
    k = _split_heads(linear(priors.tokens, p.k_weight, p.k_bias), p.heads)
    v = _split_heads(linear(priors.tokens, p.v_weight, p.v_bias), p.heads)
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(p.head_dim)  # (heads, M, S)
    attn = softmax_rows(scores)
    ctx = _merge_heads(attn @ v)                # (M, D)
    if counter is not None:
        counter.add(f"{label}.q", "projection", m * d * d)
        counter.add(f"{label}.kv", "projection", 2 * s * d * d)
        counter.add(f"{label}.attn_qk", "attention", m * s * d)
        counter.add(f"{label}.attn_av", "attention", m * s * d)
        counter.elementwise(m * d + p.heads * m * s)  # ln1 + softmax
    y = _attention_tail(xf, ctx, p, counter, label)
    out = y.reshape(t, h, w, d)
    if return_internals:
        att_out = linear(ctx, p.out_weight, p.out_bias)
        return out, {"priors": priors, "attn_out": att_out,
                     "weights": attn}
    return out


def peg(x: np.ndarray, params: PegParams, counter=None,
        label: str = "peg") -> np.ndarray:
    """Position encoding generator: depth-wise 3x3x3 conv (zero padding) plus
    the identity."""
    if x.shape[-1] != params.channels:
        raise ShapeError(
            f"map channels {x.shape[-1]} != peg channels {params.channels}")
    out = depthwise_conv3d(x, params.kernel, padding=(1, 1, 1)) + x
    if counter is not None:
        t, h, w, d = x.shape
        counter.add(label, "conv", 27 * t * h * w * d)
        counter.elementwise(t * h * w * d)
    return out


# ---------------------------------------------------------------------------
# backward passes
# ---------------------------------------------------------------------------

def _attention_core_bwd(g_ctx, q, k, v, attn, head_dim):
    """Backward through softmax(q kT / sqrt(hd)) v given head-split arrays."""
    d_attn = g_ctx @ v.swapaxes(-1, -2)
    d_v = attn.swapaxes(-1, -2) @ g_ctx
    d_scores = softmax_rows_vjp(d_attn, attn) / math.sqrt(head_dim)
    d_q = d_scores @ k
    d_k = d_scores.swapaxes(-1, -2) @ q
    return d_q, d_k, d_v


def _tail_fwd_cache(tokens, ctx, p):
    att_out = linear(ctx, p.out_weight, p.out_bias)
    x1 = tokens + att_out
    x1n = layer_norm(x1, p.ln2_gain, p.ln2_shift)
    z1 = linear(x1n, p.mlp_in_weight, p.mlp_in_bias)
    hidden = gelu(z1)
    y = x1 + linear(hidden, p.mlp_out_weight, p.mlp_out_bias)
    return y, (x1, x1n, z1, hidden)


def _tail_bwd(g, ctx, p, cache, grads):
    x1, x1n, z1, hidden = cache
    d_hidden, grads["mlp_out.weight"], grads["mlp_out.bias"] = linear_vjp(
        g, hidden, p.mlp_out_weight)
    d_z1 = gelu_vjp(d_hidden, z1)
    d_x1n, grads["mlp_in.weight"], grads["mlp_in.bias"] = linear_vjp(
        d_z1, x1n, p.mlp_in_weight)
    d_ln2, grads["ln2.gain"], grads["ln2.shift"] = layer_norm_vjp(
        d_x1n, x1, p.ln2_gain)
    g_x1 = g + d_ln2
    d_ctx, grads["out.weight"], grads["out.bias"] = linear_vjp(
        g_x1, ctx, p.out_weight)
    return g_x1, d_ctx


def lw_msa_backward(x: np.ndarray, grid: WindowGrid, p: AttentionParams,
                    g_out: np.ndarray):
    """Gradient of the lw sub-layer; returns (dx, param-gradient dict)."""
    xw = window_partition(x, grid)
    xn = layer_norm(xw, p.ln1_gain, p.ln1_shift)
    qf = linear(xn, p.q_weight, p.q_bias)
    kf = linear(xn, p.k_weight, p.k_bias)
    vf = linear(xn, p.v_weight, p.v_bias)
    q, k, v = (_split_heads(a, p.heads) for a in (qf, kf, vf))
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(p.head_dim)
    attn = softmax_rows(scores)
    ctx = _merge_heads(attn @ v)
    _, tail_cache = _tail_fwd_cache(xw, ctx, p)

    grads: dict[str, np.ndarray] = {}
    g = window_partition(g_out, grid)
    g_x1, d_ctx = _tail_bwd(g, ctx, p, tail_cache, grads)
    d_q, d_k, d_v = _attention_core_bwd(
        _split_heads(d_ctx, p.heads), q, k, v, attn, p.head_dim)
    d_xn_q, grads["q.weight"], grads["q.bias"] = linear_vjp(
        _merge_heads(d_q), xn, p.q_weight)
    d_xn_k, grads["k.weight"], grads["k.bias"] = linear_vjp(
        _merge_heads(d_k), xn, p.k_weight)
    d_xn_v, grads["v.weight"], grads["v.bias"] = linear_vjp(
        _merge_heads(d_v), xn, p.v_weight)
    d_ln1, grads["ln1.gain"], grads["ln1.shift"] = layer_norm_vjp(
        d_xn_q + d_xn_k + d_xn_v, xw, p.ln1_gain)
    return window_reverse(g_x1 + d_ln1, grid), grads


def gp_msa_backward(x: np.ndarray, spec: PyramidSpec, kernels: PyramidKernels,
                    p: AttentionParams, g_out: np.ndarray):
    """Gradient of the gp sub-layer; returns (dx, param dict, kernel dict)."""
    t, h, w, d = x.shape
    m = t * h * w
    xf = x.reshape(m, d)
    xn = layer_norm(xf, p.ln1_gain, p.ln1_shift)
    xn_map = xn.reshape(t, h, w, d)
    resolved = spec.resolve((t, h, w))

    mids, pooled_list = [], []
    for scale, (k_time, k_space) in zip(resolved, kernels.pairs):
        mid = depthwise_conv3d(xn_map, k_time)
        mids.append(mid)
        pooled_list.append(depthwise_conv3d(mid, k_space))
    tokens = np.concatenate([blk.reshape(-1, d) for blk in pooled_list], axis=0)

    qf = linear(xn, p.q_weight, p.q_bias)
    kf = linear(tokens, p.k_weight, p.k_bias)
    vf = linear(tokens, p.v_weight, p.v_bias)
    q, k, v = (_split_heads(a, p.heads) for a in (qf, kf, vf))
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(p.head_dim)
    attn = softmax_rows(scores)
    ctx = _merge_heads(attn @ v)
    _, tail_cache = _tail_fwd_cache(xf, ctx, p)

    grads: dict[str, np.ndarray] = {}
    g = g_out.reshape(m, d)
    g_x1, d_ctx = _tail_bwd(g, ctx, p, tail_cache, grads)
    d_q, d_k, d_v = _attention_core_bwd(
        _split_heads(d_ctx, p.heads), q, k, v, attn, p.head_dim)
    d_xn, grads["q.weight"], grads["q.bias"] = linear_vjp(
        _merge_heads(d_q), xn, p.q_weight)
    d_tok_k, grads["k.weight"], grads["k.bias"] = linear_vjp(
        _merge_heads(d_k), tokens, p.k_weight)
    d_tok_v, grads["v.weight"], grads["v.bias"] = linear_vjp(
        _merge_heads(d_v), tokens, p.v_weight)
    d_tokens = d_tok_k + d_tok_v

    kernel_grads: dict[str, np.ndarray] = {}
    d_xn_map = np.zeros_like(xn_map)
    offset = 0
    for i, (scale, (k_time, k_space)) in enumerate(zip(resolved, kernels.pairs)):
        k1, k2, k3 = scale
        count = k1 * k2 * k3
        g_pooled = d_tokens[offset:offset + count].reshape(k1, k2, k3, d)
        offset += count
        d_mid, dw_s, db_s = depthwise_conv3d_vjp(g_pooled, mids[i], k_space)
        d_map, dw_t, db_t = depthwise_conv3d_vjp(d_mid, xn_map, k_time)
        d_xn_map += d_map
        kernel_grads[f"pool{i}.space.weight"] = dw_s
        kernel_grads[f"pool{i}.space.bias"] = db_s
        kernel_grads[f"pool{i}.time.weight"] = dw_t
        kernel_grads[f"pool{i}.time.bias"] = db_t

    d_ln1, grads["ln1.gain"], grads["ln1.shift"] = layer_norm_vjp(
        d_xn + d_xn_map.reshape(m, d), xf, p.ln1_gain)
    dx = (g_x1 + d_ln1).reshape(t, h, w, d)
    return dx, grads, kernel_grads


def peg_backward(x: np.ndarray, params: PegParams, g_out: np.ndarray):
    """Gradient of the peg; returns (dx, {"weight": ..., "bias": ...})."""
    d_conv, d_w, d_b = depthwise_conv3d_vjp(g_out, x, params.kernel,
                                            padding=(1, 1, 1))
    return g_out + d_conv, {"weight": d_w, "bias": d_b}
