"""Dense numeric kernels: matmul, softmax, layer norm, GELU, linear maps and
depth-wise 3D convolution, together with their hand-written backward passes
and a central finite-difference gradient checker.

Arrays are plain C-contiguous numpy ndarrays. Double precision is the default
everywhere; single precision is an opt-in for the benchmark path only, so the
1e-10-ish tolerances used by the oracle tests stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_SQRT1_2 = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Array extents are inconsistent with the operation's contract."""


class ConfigError(ValueError):
    """A configuration value is invalid (unknown preset, bad head count, ...)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Coerce to a C-contiguous float ndarray."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def ensure_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced in {where}")
    return arr


# ---------------------------------------------------------------------------
# core kernels
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m,k) and b (k,n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def matmul_vjp(g: np.ndarray, a: np.ndarray, b: np.ndarray):
    return g @ b.T, a.T @ g


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with per-row max subtraction for stability."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= np.sum(shifted, axis=-1, keepdims=True)
    return shifted


def softmax_rows_vjp(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Backward of softmax_rows given its output s."""
    return s * (g - np.sum(g * s, axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
               eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to mean 0 / variance 1 (population), then apply
    the elementwise affine gain * xhat + shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm affine extents {gain.shape}/{shift.shape} do not match "
            f"feature extent {d}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    xhat = centered / np.sqrt(var + eps)
    return gain * xhat + shift


def layer_norm_vjp(g: np.ndarray, x: np.ndarray, gain: np.ndarray,
                   eps: float = 1e-5):
    """Backward of layer_norm; returns (dx, dgain, dshift)."""
    d = x.shape[-1]
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    lead = tuple(range(x.ndim - 1))
    dgain = np.sum(g * xhat, axis=lead)
    dshift = np.sum(g, axis=lead)

    gx = g * gain
    dx = inv_std * (gx
                    - np.mean(gx, axis=-1, keepdims=True)
                    - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
    return dx, dgain, dshift


def gelu(x: np.ndarray) -> np.ndarray:
    """x * Phi(x) with Phi the standard normal CDF (exact erf form)."""
    return x * 0.5 * (1.0 + erf(x * _SQRT1_2))


def gelu_vjp(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None
           ) -> np.ndarray:
    """Affine map over the last axis: x (..., Din) @ weight (Din, Dout) + bias."""
    d_in = x.shape[-1]
    if weight.ndim != 2 or weight.shape[0] != d_in:
        raise ShapeError(
            f"linear weight {weight.shape} does not match input extent {d_in}")
    flat = x.reshape(-1, d_in)
    out = flat @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"linear bias {bias.shape} does not match output extent "
                f"{weight.shape[1]}")
        out = out + bias
    return out.reshape(x.shape[:-1] + (weight.shape[1],))


def linear_vjp(g: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Backward of linear; returns (dx, dweight, dbias)."""
    d_in = x.shape[-1]
    d_out = weight.shape[1]
    gf = g.reshape(-1, d_out)
    xf = x.reshape(-1, d_in)
    dx = (gf @ weight.T).reshape(x.shape)
    dweight = xf.T @ gf
    dbias = gf.sum(axis=0)
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# depth-wise 3D convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvKernel3D:
    """Depth-wise 3D kernel: one (k_t, k_h, k_w) filter per channel.

    weights has shape (C, k_t, k_h, k_w); output channel c depends only on
    input channel c.
    """

    weights: np.ndarray
    stride: tuple[int, int, int] = (1, 1, 1)
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(
                f"depth-wise kernel weights must be (C, k_t, k_h, k_w), "
                f"got {self.weights.shape}")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"strides must be >= 1, got {self.stride}")
        if any(k < 1 for k in self.extent):
            raise ShapeError(f"kernel extents must be >= 1, got {self.extent}")
        if self.bias is not None and self.bias.shape != (self.channels,):
            raise ShapeError(
                f"kernel bias {self.bias.shape} does not match {self.channels} "
                f"channels")

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.weights.shape[1:])


def _conv_out_extent(size: int, pad: int, k: int, stride: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output extent along {axis} is not a positive integer: "
            f"(({size} + 2*{pad}) - {k}) / {stride} + 1")
    return span // stride + 1


def depthwise_conv3d(x: np.ndarray, kernel: ConvKernel3D,
                     padding: tuple[int, int, int] = (0, 0, 0)) -> np.ndarray:
    """Per-channel cross-correlation of x (T, H, W, C) with zero padding.

    Accumulation runs over kernel offsets in ascending (dt, dh, dw) order, so
    the reduction order is fixed and results are bit-stable.
    """
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv3d expects (T, H, W, C), got {x.shape}")
    t, h, w, c = x.shape
    if c != kernel.channels:
        raise ShapeError(
            f"input has {c} channels but kernel has {kernel.channels}")
    kt, kh, kw = kernel.extent
    st, sh, sw = kernel.stride
    pt, ph, pw = padding
    ot = _conv_out_extent(t, pt, kt, st, "time")
    oh = _conv_out_extent(h, ph, kh, sh, "height")
    ow = _conv_out_extent(w, pw, kw, sw, "width")

    if padding != (0, 0, 0):
        xp = np.zeros((t + 2 * pt, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
        xp[pt:pt + t, ph:ph + h, pw:pw + w, :] = x
    else:
        xp = x

    out = np.zeros((ot, oh, ow, c), dtype=x.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                patch = xp[dt:dt + ot * st:st,
                           dh:dh + oh * sh:sh,
                           dw:dw + ow * sw:sw, :]
                out += patch * kernel.weights[:, dt, dh, dw]
    if kernel.bias is not None:
        out += kernel.bias
    return out


def depthwise_conv3d_vjp(g: np.ndarray, x: np.ndarray, kernel: ConvKernel3D,
                         padding: tuple[int, int, int] = (0, 0, 0)):
    """Backward of depthwise_conv3d; returns (dx, dweights, dbias)."""
    t, h, w, c = x.shape
    kt, kh, kw = kernel.extent
    st, sh, sw = kernel.stride
    pt, ph, pw = padding
    ot, oh, ow = g.shape[:3]

    if padding != (0, 0, 0):
        xp = np.zeros((t + 2 * pt, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
        xp[pt:pt + t, ph:ph + h, pw:pw + w, :] = x
    else:
        xp = x
    dxp = np.zeros_like(xp)
    dweights = np.zeros_like(kernel.weights)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                sl = (slice(dt, dt + ot * st, st),
                      slice(dh, dh + oh * sh, sh),
                      slice(dw, dw + ow * sw, sw))
                dxp[sl] += g * kernel.weights[:, dt, dh, dw]
                dweights[:, dt, dh, dw] = np.sum(xp[sl] * g, axis=(0, 1, 2))
    dx = dxp[pt:pt + t, ph:ph + h, pw:pw + w, :]
    if padding == (0, 0, 0):
        dx = dxp
    dbias = None if kernel.bias is None else g.sum(axis=(0, 1, 2))
    return dx, dweights, dbias


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 clip: float = 2.0) -> np.ndarray:
    """Normal draws with |z| > clip resampled, scaled by std. Deterministic
    for a given generator state."""
    draws = rng.standard_normal(shape)
    bad = np.abs(draws) > clip
    while bad.any():
        draws[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(draws) > clip
    return draws * std


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at every coordinate."""
    if eps <= 0:
        raise ConfigError("finite_diff_grad eps must be positive")
    grad = np.zeros_like(x, dtype=DEFAULT_DTYPE)
    flat = grad.reshape(-1)
    for i in range(x.size):
        flat[i] = finite_diff_at(f, x, i, eps)
    return grad


def finite_diff_at(f, x: np.ndarray, index: int, eps: float = 1e-5) -> float:
    """Central difference of a scalar function along one flat coordinate."""
    xp = x.copy()
    fp = xp.reshape(-1)
    base = fp[index]
    fp[index] = base + eps
    hi = float(f(xp))
    fp[index] = base - eps
    lo = float(f(xp))
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NumericError("finite_diff evaluation produced non-finite values")
    return (hi - lo) / (2.0 * eps)
