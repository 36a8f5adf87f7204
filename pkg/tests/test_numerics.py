import math

import numpy as np
import pytest

from dftk.numerics import (
    ConvKernel3D,
    NumericError,
    ShapeError,
    depthwise_conv3d,
    depthwise_conv3d_vjp,
    finite_diff_at,
    finite_diff_grad,
    gelu,
    gelu_vjp,
    layer_norm,
    layer_norm_vjp,
    linear,
    linear_vjp,
    matmul,
    matmul_vjp,
    softmax_rows,
    softmax_rows_vjp,
)
from dftk import tensor_io

RNG = np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    b = RNG.standard_normal((3, 3))
    eye = np.eye(3)
    assert np.array_equal(matmul(eye, b), b)
    assert np.array_equal(matmul(b, eye), b)


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out, np.array([[2.0], [4.0]]))


def test_matmul_mismatch():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform_on_equal_rows():
    out = softmax_rows(np.full((2, 5), 3.7))
    assert np.allclose(out, 0.2, atol=1e-15)


def test_softmax_analytic_row():
    out = softmax_rows(np.array([[0.0, math.log(2.0)]]))
    assert np.allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)


def test_softmax_shift_invariance_and_row_sums():
    x = RNG.standard_normal((6, 9))
    out = softmax_rows(x)
    shifted = softmax_rows(x + 17.25)
    assert np.max(np.abs(out - shifted)) < 1e-12
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-12
    assert np.all(out >= 0)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(np.full((1, 4), 2.5), np.ones(4), np.zeros(4))
    assert np.array_equal(out, np.zeros((1, 4)))


def test_layer_norm_two_point_row():
    out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2))
    # population variance 1, so (x - 2) / sqrt(1 + eps)
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_output_statistics():
    # oracle: direct mean/variance of the normalized output; row variance must
    # dominate eps=1e-5 for the variance check to be meaningful
    x = RNG.standard_normal((8, 33)) * 10.0 + 1.0
    out = layer_norm(x, np.ones(33), np.zeros(33))
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-10
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-6


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        layer_norm(np.zeros((2, 4)), np.ones(3), np.zeros(3))


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------

def test_gelu_anchor_points():
    assert gelu(np.array(0.0)) == 0.0
    assert abs(float(gelu(np.array(10.0))) - 10.0) < 1e-6
    # Phi(1) computed from the stdlib erf as an independent oracle
    phi1 = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert phi1 == pytest.approx(0.8413447460685429, abs=1e-15)
    assert float(gelu(np.array(1.0))) == pytest.approx(phi1, abs=1e-12)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def test_linear_identity_and_bias():
    x = RNG.standard_normal((5, 4))
    assert np.array_equal(linear(x, np.eye(4), np.zeros(4)), x)
    b = RNG.standard_normal(3)
    out = linear(x, np.zeros((4, 3)), b)
    assert np.array_equal(out, np.broadcast_to(b, (5, 3)))


def test_linear_matches_matmul_plus_bias():
    x = RNG.standard_normal((7, 6))
    w = RNG.standard_normal((6, 2))
    b = RNG.standard_normal(2)
    assert np.max(np.abs(linear(x, w, b) - (matmul(x, w) + b))) < 1e-12


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(np.zeros((2, 3)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# depth-wise conv3d
# ---------------------------------------------------------------------------

def test_dwconv_box_sum():
    kernel = ConvKernel3D(np.ones((1, 2, 2, 2)), stride=(2, 2, 2))
    out = depthwise_conv3d(np.ones((4, 4, 4, 1)), kernel)
    assert out.shape == (2, 2, 2, 1)
    assert np.array_equal(out, np.full((2, 2, 2, 1), 8.0))


def test_dwconv_zero_kernel():
    kernel = ConvKernel3D(np.zeros((3, 2, 1, 2)), stride=(1, 1, 1),
                          bias=np.zeros(3))
    out = depthwise_conv3d(RNG.standard_normal((4, 3, 4, 3)), kernel)
    assert np.array_equal(out, np.zeros_like(out))


def test_dwconv_pointwise_identity():
    kernel = ConvKernel3D(np.ones((5, 1, 1, 1)), stride=(1, 1, 1))
    x = RNG.standard_normal((2, 3, 4, 5))
    assert np.array_equal(depthwise_conv3d(x, kernel), x)


def test_dwconv_shape_errors():
    kernel = ConvKernel3D(np.ones((1, 2, 2, 2)), stride=(2, 2, 2))
    with pytest.raises(ShapeError, match="time"):
        depthwise_conv3d(np.ones((5, 4, 4, 1)), kernel)
    with pytest.raises(ShapeError, match="channels"):
        depthwise_conv3d(np.ones((4, 4, 4, 2)), kernel)


def test_dwconv_linearity():
    kernel = ConvKernel3D(RNG.standard_normal((3, 2, 2, 2)), stride=(1, 2, 2))
    x = RNG.standard_normal((4, 4, 4, 3))
    y = RNG.standard_normal((4, 4, 4, 3))
    lhs = depthwise_conv3d(2.5 * x - 1.25 * y, kernel)
    rhs = 2.5 * depthwise_conv3d(x, kernel) - 1.25 * depthwise_conv3d(y, kernel)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_finite_diff_quadratic():
    x = RNG.standard_normal((3, 4))
    grad = finite_diff_grad(lambda v: 0.5 * float(np.sum(v * v)), x)
    assert np.max(np.abs(grad - x)) < 1e-8


def test_finite_diff_sum():
    x = RNG.standard_normal(7)
    grad = finite_diff_grad(lambda v: float(np.sum(v)), x)
    assert np.max(np.abs(grad - 1.0)) < 1e-9


def test_finite_diff_softmax_sum_is_zero():
    x = RNG.standard_normal((3, 5))
    grad = finite_diff_grad(lambda v: float(np.sum(softmax_rows(v))), x)
    assert np.max(np.abs(grad)) < 1e-6


def test_finite_diff_nonfinite_errors():
    with pytest.raises(NumericError):
        finite_diff_at(lambda v: float("nan"), np.zeros(2), 0)


# ---------------------------------------------------------------------------
# backward passes vs finite differences (relative error < 1e-5)
# ---------------------------------------------------------------------------

def _check_grad(loss, x, analytic, rel_tol=1e-5, probes=12):
    rng = np.random.default_rng(99)
    for idx in rng.choice(x.size, size=min(probes, x.size), replace=False):
        fd = finite_diff_at(loss, x, int(idx))
        an = float(analytic.reshape(-1)[idx])
        assert abs(an - fd) <= rel_tol * max(abs(an), abs(fd), 1e-6)


def test_matmul_vjp():
    a = RNG.standard_normal((4, 3))
    b = RNG.standard_normal((3, 5))
    g = RNG.standard_normal((4, 5))
    da, db = matmul_vjp(g, a, b)
    _check_grad(lambda v: float(np.sum(g * matmul(v, b))), a, da)
    _check_grad(lambda v: float(np.sum(g * matmul(a, v))), b, db)


def test_softmax_vjp():
    x = RNG.standard_normal((4, 6))
    g = RNG.standard_normal((4, 6))
    dx = softmax_rows_vjp(g, softmax_rows(x))
    _check_grad(lambda v: float(np.sum(g * softmax_rows(v))), x, dx)


def test_layer_norm_vjp():
    x = RNG.standard_normal((5, 8))
    gain = RNG.standard_normal(8)
    shift = RNG.standard_normal(8)
    g = RNG.standard_normal((5, 8))
    dx, dgain, dshift = layer_norm_vjp(g, x, gain)
    _check_grad(lambda v: float(np.sum(g * layer_norm(v, gain, shift))), x, dx)
    _check_grad(lambda v: float(np.sum(g * layer_norm(x, v, shift))), gain, dgain)
    _check_grad(lambda v: float(np.sum(g * layer_norm(x, gain, v))), shift, dshift)


def test_gelu_vjp():
    x = RNG.standard_normal((3, 7))
    g = RNG.standard_normal((3, 7))
    _check_grad(lambda v: float(np.sum(g * gelu(v))), x, gelu_vjp(g, x))


def test_linear_vjp():
    x = RNG.standard_normal((6, 4))
    w = RNG.standard_normal((4, 3))
    b = RNG.standard_normal(3)
    g = RNG.standard_normal((6, 3))
    dx, dw, db = linear_vjp(g, x, w)
    _check_grad(lambda v: float(np.sum(g * linear(v, w, b))), x, dx)
    _check_grad(lambda v: float(np.sum(g * linear(x, v, b))), w, dw)
    _check_grad(lambda v: float(np.sum(g * linear(x, w, v))), b, db)


def test_dwconv_vjp():
    kernel = ConvKernel3D(RNG.standard_normal((2, 2, 3, 2)), stride=(1, 2, 1),
                          bias=RNG.standard_normal(2))
    x = RNG.standard_normal((3, 5, 4, 2))
    pad = (1, 1, 1)
    out = depthwise_conv3d(x, kernel, pad)
    g = RNG.standard_normal(out.shape)
    dx, dw, db = depthwise_conv3d_vjp(g, x, kernel, pad)
    _check_grad(lambda v: float(np.sum(g * depthwise_conv3d(v, kernel, pad))),
                x, dx)

    def loss_w(wv):
        k2 = ConvKernel3D(wv, kernel.stride, kernel.bias)
        return float(np.sum(g * depthwise_conv3d(x, k2, pad)))
    _check_grad(loss_w, kernel.weights, dw)
    assert np.max(np.abs(db - g.sum(axis=(0, 1, 2)))) < 1e-12


def test_outputs_finite_on_finite_inputs():
    x = RNG.standard_normal((4, 6)) * 50.0
    for out in (softmax_rows(x), gelu(x),
                layer_norm(x, np.ones(6), np.zeros(6))):
        assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------

def test_container_roundtrip(tmp_path):
    for dtype in (np.float64, np.float32):
        arr = RNG.standard_normal((2, 3, 4)).astype(dtype)
        path = tmp_path / f"{np.dtype(dtype).name}.dftk"
        tensor_io.save_tensor(path, arr)
        back = tensor_io.load_tensor(path)
        assert back.dtype == dtype
        assert np.array_equal(back, arr)


def test_container_header_layout(tmp_path):
    path = tmp_path / "t.dftk"
    tensor_io.save_tensor(path, np.arange(6, dtype=np.float64).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"DFTK"
    assert int.from_bytes(raw[4:8], "little") == 1      # version
    assert int.from_bytes(raw[8:12], "little") == 2      # rank
    assert int.from_bytes(raw[12:20], "little") == 2     # extent 0
    assert int.from_bytes(raw[20:28], "little") == 3     # extent 1
    assert int.from_bytes(raw[28:32], "little") == 0     # dtype tag f64


def test_container_bad_magic(tmp_path):
    path = tmp_path / "bad.dftk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ShapeError, match="magic"):
        tensor_io.load_tensor(path)
