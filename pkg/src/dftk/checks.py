"""Runnable verification suites: oracle equivalences and gradient checks.

These back both the test suite and the `oracle-check` / `gradcheck` CLI
commands. Every check returns a CheckResult with the measured worst error
and its tolerance instead of asserting, so callers decide how to report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import oracle
from .attention import (
    WHOLE,
    AttentionParams,
    PegParams,
    PyramidKernels,
    PyramidSpec,
    WindowGrid,
    gp_msa_backward,
    gp_msa_sublayer,
    lw_msa_backward,
    lw_msa_sublayer,
    peg,
    peg_backward,
    pyramid_downsample,
)
from .model import (
    forward,
    forward_backward,
    inflate_2d,
    inflate_2d_depthwise,
    init_random,
    micro_config,
    nonoverlap_conv3d,
    synthetic_clip,
)
from .numerics import (
    ConvKernel3D,
    depthwise_conv3d,
    finite_diff_at,
    gelu,
    gelu_vjp,
    layer_norm,
    layer_norm_vjp,
    linear,
    linear_vjp,
    softmax_rows,
)


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = f"  ({self.detail})" if self.detail else ""
        return (f"{status}  {self.name:<28} max_err={self.max_err:.3e}  "
                f"tol={self.tol:.0e}{detail}")


# ---------------------------------------------------------------------------
# oracle reference paths (shared projections, loop-based attention cores)
# ---------------------------------------------------------------------------

def _reference_tail(xf, ctx, p):
    x1 = xf + linear(ctx, p.out_weight, p.out_bias)
    x1n = layer_norm(x1, p.ln2_gain, p.ln2_shift)
    hidden = gelu(linear(x1n, p.mlp_in_weight, p.mlp_in_bias))
    return x1 + linear(hidden, p.mlp_out_weight, p.mlp_out_bias)


def lw_reference(x: np.ndarray, grid: WindowGrid, p: AttentionParams
                 ) -> np.ndarray:
    """Window attention computed as masked full attention over raster-ordered
    tokens (block-diagonal window mask), with the same projections and MLP."""
    t, h, w, d = x.shape
    xf = x.reshape(-1, d)
    xn = layer_norm(xf, p.ln1_gain, p.ln1_shift)
    q = linear(xn, p.q_weight, p.q_bias)
    k = linear(xn, p.k_weight, p.k_bias)
    v = linear(xn, p.v_weight, p.v_bias)
    mask = oracle.window_block_mask(grid)
    hd = p.head_dim
    ctx = np.empty_like(q)
    for head in range(p.heads):
        sl = slice(head * hd, (head + 1) * hd)
        ctx[:, sl] = oracle.masked_attention_ref(q[:, sl], k[:, sl], v[:, sl],
                                                 mask)
    return _reference_tail(xf, ctx, p).reshape(t, h, w, d)


def gp_reference(x: np.ndarray, spec: PyramidSpec, p: AttentionParams
                 ) -> np.ndarray:
    """Pyramid attention with priors from the adaptive-average-pool oracle and
    a loop-based cross-attention core. Matches the vectorized sub-layer when
    its downsampling kernels are uniform averages."""
    t, h, w, d = x.shape
    xf = x.reshape(-1, d)
    xn = layer_norm(xf, p.ln1_gain, p.ln1_shift)
    xn_map = xn.reshape(t, h, w, d)
    blocks = [oracle.adaptive_avg_pool3d_ref(xn_map, scale).reshape(-1, d)
              for scale in spec.resolve((t, h, w))]
    priors = np.concatenate(blocks, axis=0)
    q = linear(xn, p.q_weight, p.q_bias)
    k = linear(priors, p.k_weight, p.k_bias)
    v = linear(priors, p.v_weight, p.v_bias)
    hd = p.head_dim
    ctx = np.empty_like(q)
    for head in range(p.heads):
        sl = slice(head * hd, (head + 1) * hd)
        ctx[:, sl] = oracle.full_attention_ref(q[:, sl], k[:, sl], v[:, sl])
    return _reference_tail(xf, ctx, p).reshape(t, h, w, d)


# ---------------------------------------------------------------------------
# oracle-equivalence suites
# ---------------------------------------------------------------------------

def _random_lw_instance(rng):
    window = tuple(int(rng.choice([1, 2])) for _ in range(3))
    ext = tuple(w * int(rng.integers(1, 8 // w + 1))
                for w in window)  # map extents up to 8 per axis
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.choice([4, 8, 16]))
    x = rng.standard_normal(ext + (d,))
    return x, WindowGrid(ext, window), AttentionParams.random(d, heads, rng)


def _random_scale(rng, ext):
    def divisors(n):
        return [k for k in range(1, n + 1) if n % k == 0]
    return tuple(int(rng.choice(divisors(s))) for s in ext)


def check_lw_oracle(instances: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        x, grid, p = _random_lw_instance(rng)
        fast = lw_msa_sublayer(x, grid, p)
        ref = lw_reference(x, grid, p)
        worst = max(worst, float(np.max(np.abs(fast - ref))))
    return CheckResult("lw vs masked-full-attention", worst, 1e-10,
                       f"{instances} instances")


def check_pool_oracle(instances: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        ext = tuple(int(rng.integers(1, 9)) for _ in range(3))
        d = int(rng.choice([2, 4, 8]))
        scales = [_random_scale(rng, ext)]
        if rng.random() < 0.5:
            extra = WHOLE if rng.random() < 0.3 else _random_scale(rng, ext)
            if extra != scales[0]:
                scales.append(extra)
        spec = PyramidSpec(tuple(scales))
        kernels = PyramidKernels.averaging(spec, ext, d)
        x = rng.standard_normal(ext + (d,))
        priors = pyramid_downsample(x, spec, kernels)
        if priors.tokens.shape[0] != spec.prior_count(ext):
            return CheckResult("pyramid pool vs adaptive-avg-pool", math.inf,
                               1e-10, "prior count mismatch")
        ref = np.concatenate(
            [oracle.adaptive_avg_pool3d_ref(x, s).reshape(-1, d)
             for s in spec.resolve(ext)], axis=0)
        worst = max(worst, float(np.max(np.abs(priors.tokens - ref))))
    return CheckResult("pyramid pool vs adaptive-avg-pool", worst, 1e-10,
                       f"{instances} instances")


def check_gp_oracle(instances: int = 50, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        ext = tuple(int(rng.choice([2, 4])) for _ in range(3))
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.choice([4, 8]))
        scales = [(1, 1, 1), _random_scale(rng, ext)]
        if scales[1] == scales[0]:
            scales = scales[:1]
        spec = PyramidSpec(tuple(scales))
        kernels = PyramidKernels.averaging(spec, ext, d)
        p = AttentionParams.random(d, heads, rng)
        x = rng.standard_normal(ext + (d,))
        fast = gp_msa_sublayer(x, spec, kernels, p)
        ref = gp_reference(x, spec, p)
        worst = max(worst, float(np.max(np.abs(fast - ref))))
    return CheckResult("gp vs pooled cross-attention", worst, 1e-10,
                       f"{instances} instances")


def check_inflation(seed: int = 3) -> CheckResult:
    """Inflated 2D kernels reproduce the 2D convolution on temporally
    constant input, for both the full and the depth-wise kernel layout."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t_extent in (1, 2, 3):
        kh, kw, cin, cout = 3, 2, 2, 4
        w2d = rng.standard_normal((kh, kw, cin, cout))
        frame = rng.standard_normal((kh * 2, kw * 3, cin))
        ref = oracle.conv2d_ref(frame, w2d, stride=(kh, kw))
        clip = np.repeat(frame[None], t_extent, axis=0)
        out = nonoverlap_conv3d(clip, inflate_2d(w2d, t_extent), None)
        worst = max(worst, float(np.max(np.abs(out[0] - ref))))

        c = 3
        dw2d = rng.standard_normal((c, kh, kw))
        frame = rng.standard_normal((kh + 4, kw + 2, c))
        kernel = ConvKernel3D(inflate_2d_depthwise(dw2d, t_extent),
                              stride=(t_extent, 1, 1))
        clip = np.repeat(frame[None], t_extent, axis=0)
        out = depthwise_conv3d(clip, kernel)
        for ch in range(c):
            ref_ch = oracle.conv2d_ref(frame[:, :, ch:ch + 1],
                                       dw2d[ch][:, :, None, None])
            worst = max(worst,
                        float(np.max(np.abs(out[0, :, :, ch] - ref_ch[:, :, 0]))))
    return CheckResult("2d->3d kernel inflation", worst, 1e-10)


def run_oracle_checks(instances: int = 100, seed: int = 0,
                      inject_fault: bool = False) -> list[CheckResult]:
    results = [
        check_lw_oracle(instances, seed),
        check_pool_oracle(instances, seed + 1),
        check_gp_oracle(max(10, instances // 2), seed + 2),
        check_inflation(seed + 3),
    ]
    if inject_fault:
        results.append(CheckResult("injected fault", 1.0, 1e-10,
                                   "test hook"))
    return results


# ---------------------------------------------------------------------------
# gradient suites
# ---------------------------------------------------------------------------

def _rel_err(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)


def _probe_input_grad(fn_forward, fn_backward, x, coords, eps, rng):
    """Compare an analytic input gradient against central differences at
    `coords` random coordinates of a scalar loss sum(w * fn(x))."""
    w = rng.standard_normal(fn_forward(x).shape)
    dx = fn_backward(x, w)
    worst = 0.0
    for idx in rng.choice(x.size, size=min(coords, x.size), replace=False):
        fd = finite_diff_at(lambda xv: float(np.sum(w * fn_forward(xv))),
                            x, int(idx), eps)
        worst = max(worst, _rel_err(float(dx.reshape(-1)[idx]), fd))
    return worst


def check_grad_lw(coords: int = 20, eps: float = 1e-5, seed: int = 10,
                  tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    grid = WindowGrid((2, 4, 4), (2, 2, 2))
    p = AttentionParams.random(8, 2, rng)
    x = rng.standard_normal((2, 4, 4, 8))
    worst = _probe_input_grad(
        lambda xv: lw_msa_sublayer(xv, grid, p),
        lambda xv, g: lw_msa_backward(xv, grid, p, g)[0],
        x, coords, eps, rng)
    return CheckResult("grad lw input", worst, tol)


def check_grad_gp(coords: int = 20, eps: float = 1e-5, seed: int = 11,
                  tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    spec = PyramidSpec(((1, 2, 2), (2, 2, 2)))
    kernels = PyramidKernels.random(spec, (2, 4, 4), 8, rng)
    p = AttentionParams.random(8, 2, rng)
    x = rng.standard_normal((2, 4, 4, 8))
    worst = _probe_input_grad(
        lambda xv: gp_msa_sublayer(xv, spec, kernels, p),
        lambda xv, g: gp_msa_backward(xv, spec, kernels, p, g)[0],
        x, coords, eps, rng)
    return CheckResult("grad gp input", worst, tol)


def check_grad_peg(coords: int = 20, eps: float = 1e-5, seed: int = 12,
                   tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    c = 4
    kernel = ConvKernel3D(rng.standard_normal((c, 3, 3, 3)), (1, 1, 1),
                          rng.standard_normal(c))
    params = PegParams(kernel)
    x = rng.standard_normal((3, 4, 4, c))
    w = rng.standard_normal(x.shape)

    dx, kgrads = peg_backward(x, params, w)
    worst = 0.0
    for idx in rng.choice(x.size, size=coords, replace=False):
        fd = finite_diff_at(
            lambda xv: float(np.sum(w * peg(xv, params))), x, int(idx), eps)
        worst = max(worst, _rel_err(float(dx.reshape(-1)[idx]), fd))
    # weight gradient, probed through a kernel perturbation
    kw = kernel.weights
    for idx in rng.choice(kw.size, size=min(coords, kw.size), replace=False):
        def loss(wv):
            k2 = ConvKernel3D(wv, (1, 1, 1), kernel.bias)
            return float(np.sum(w * peg(x, PegParams(k2))))
        fd = finite_diff_at(loss, kw, int(idx), eps)
        worst = max(worst, _rel_err(float(kgrads["weight"].reshape(-1)[idx]), fd))
    return CheckResult("grad peg input+weight", worst, tol)


def check_grad_mlp(coords: int = 20, eps: float = 1e-5, seed: int = 13,
                   tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    d, hidden = 6, 24
    w1 = rng.standard_normal((d, hidden)) * 0.3
    b1 = rng.standard_normal(hidden) * 0.1
    w2 = rng.standard_normal((hidden, d)) * 0.3
    b2 = rng.standard_normal(d) * 0.1
    x = rng.standard_normal((5, d))
    w = rng.standard_normal((5, d))

    z1 = linear(x, w1, b1)
    hid = gelu(z1)
    d_hid, _, _ = linear_vjp(w, hid, w2)
    d_z1 = gelu_vjp(d_hid, z1)
    dx, _, _ = linear_vjp(d_z1, x, w1)

    worst = 0.0
    for idx in rng.choice(x.size, size=coords, replace=False):
        fd = finite_diff_at(
            lambda xv: float(np.sum(w * linear(gelu(linear(xv, w1, b1)),
                                               w2, b2))),
            x, int(idx), eps)
        worst = max(worst, _rel_err(float(dx.reshape(-1)[idx]), fd))
    return CheckResult("grad mlp input", worst, tol)


def check_grad_ln(coords: int = 20, eps: float = 1e-5, seed: int = 14,
                  tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = 7
    gain = rng.standard_normal(d)
    shift = rng.standard_normal(d)
    x = rng.standard_normal((6, d))
    w = rng.standard_normal((6, d))

    dx, dgain, dshift = layer_norm_vjp(w, x, gain)
    worst = 0.0
    for idx in rng.choice(x.size, size=coords, replace=False):
        fd = finite_diff_at(
            lambda xv: float(np.sum(w * layer_norm(xv, gain, shift))),
            x, int(idx), eps)
        worst = max(worst, _rel_err(float(dx.reshape(-1)[idx]), fd))
    for idx in range(d):
        fd = finite_diff_at(
            lambda gv: float(np.sum(w * layer_norm(x, gv, shift))),
            gain, idx, eps)
        worst = max(worst, _rel_err(float(dgain[idx]), fd))
        fd = finite_diff_at(
            lambda sv: float(np.sum(w * layer_norm(x, gain, sv))),
            shift, idx, eps)
        worst = max(worst, _rel_err(float(dshift[idx]), fd))
    return CheckResult("grad layer-norm", worst, tol)


def check_grad_model(coords: int = 20, eps: float = 1e-5, seed: int = 15,
                     tol: float = 1e-4) -> CheckResult:
    """End-to-end cross-entropy gradient of the micro model versus central
    differences at random parameter coordinates."""
    config = micro_config()
    state = init_random(config, seed)
    clip = synthetic_clip(config.input_extent, seed + 1)
    target = 1
    rng = np.random.default_rng(seed + 2)

    def loss_of(st):
        logits = forward(clip, config, st)
        z = logits - np.max(logits)
        return float(np.log(np.sum(np.exp(z))) - z[target])

    logits = forward(clip, config, state)
    probs = softmax_rows(logits[None])[0]
    g_logits = probs.copy()
    g_logits[target] -= 1.0
    _, grads = forward_backward(clip, config, state, g_logits)

    weight_names = [n for n, a in state.params.items() if a.size > 1]
    worst = 0.0
    for _ in range(coords):
        name = weight_names[int(rng.integers(len(weight_names)))]
        idx = int(rng.integers(state.params[name].size))
        arr = state.params[name]
        flat = arr.reshape(-1)
        base = flat[idx]
        flat[idx] = base + eps
        hi = loss_of(state)
        flat[idx] = base - eps
        lo = loss_of(state)
        flat[idx] = base
        fd = (hi - lo) / (2 * eps)
        worst = max(worst, _rel_err(float(grads[name].reshape(-1)[idx]), fd))
    return CheckResult("grad model end-to-end", worst, tol)


def run_grad_checks(coords: int = 20, eps: float = 1e-5, seed: int = 0,
                    tol: float = 1e-4,
                    inject_fault: bool = False) -> list[CheckResult]:
    results = [
        check_grad_lw(coords, eps, seed + 10, tol),
        check_grad_gp(coords, eps, seed + 11, tol),
        check_grad_peg(coords, eps, seed + 12, tol),
        check_grad_mlp(coords, eps, seed + 13, tol),
        check_grad_ln(coords, eps, seed + 14, tol),
        check_grad_model(coords, eps, seed + 15, tol),
    ]
    if inject_fault:
        results.append(CheckResult("injected fault", 1.0, tol, "test hook"))
    return results
