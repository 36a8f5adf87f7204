import numpy as np
import pytest

from dftk.attention import AttentionParams, WindowGrid, multi_head_attention
from dftk.numerics import ConfigError, ConvKernel3D, ShapeError, depthwise_conv3d
from dftk.oracle import (
    adaptive_avg_pool3d_ref,
    conv2d_ref,
    full_attention_ref,
    masked_attention_ref,
    window_block_mask,
)

RNG = np.random.default_rng(77)


def _identity_params(d):
    eye, zero = np.eye(d), np.zeros(d)
    return AttentionParams(
        heads=1,
        q_weight=eye.copy(), q_bias=zero.copy(),
        k_weight=eye.copy(), k_bias=zero.copy(),
        v_weight=eye.copy(), v_bias=zero.copy(),
        out_weight=eye.copy(), out_bias=zero.copy(),
        ln1_gain=np.ones(d), ln1_shift=zero.copy(),
        ln2_gain=np.ones(d), ln2_shift=zero.copy(),
        mlp_in_weight=np.zeros((d, 4 * d)), mlp_in_bias=np.zeros(4 * d),
        mlp_out_weight=np.zeros((4 * d, d)), mlp_out_bias=zero.copy())


# ---------------------------------------------------------------------------
# full attention
# ---------------------------------------------------------------------------

def test_full_attention_single_token():
    q = RNG.standard_normal((1, 4))
    k = RNG.standard_normal((1, 4))
    v = RNG.standard_normal((1, 4))
    assert np.allclose(full_attention_ref(q, k, v), v, atol=1e-15)


def test_full_attention_orthogonal_queries_give_value_mean():
    # zero scores -> uniform weights -> column mean of v
    q = np.zeros((3, 4))
    k = RNG.standard_normal((5, 4))
    v = RNG.standard_normal((5, 4))
    out = full_attention_ref(q, k, v)
    assert np.max(np.abs(out - v.mean(axis=0))) < 1e-12


def test_full_attention_matches_projected_core():
    # cross-check against the vectorized path with identity projections
    n, d = 6, 4
    x = RNG.standard_normal((n, d))
    ref = full_attention_ref(x, x, x)
    fast = multi_head_attention(x, x, _identity_params(d))
    assert np.max(np.abs(ref - fast)) < 1e-12


def test_full_attention_shape_error():
    with pytest.raises(ShapeError):
        full_attention_ref(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# masked attention
# ---------------------------------------------------------------------------

def test_masked_all_true_equals_full():
    q = RNG.standard_normal((4, 3))
    k = RNG.standard_normal((5, 3))
    v = RNG.standard_normal((5, 3))
    mask = np.ones((4, 5), dtype=bool)
    assert np.array_equal(masked_attention_ref(q, k, v, mask),
                          full_attention_ref(q, k, v))


def test_masked_block_diagonal_equals_per_window():
    grid = WindowGrid((2, 2, 2), (1, 2, 2))
    d = 3
    m = grid.token_count
    q = RNG.standard_normal((m, d))
    k = RNG.standard_normal((m, d))
    v = RNG.standard_normal((m, d))
    mask = window_block_mask(grid)
    out = masked_attention_ref(q, k, v, mask)
    # second path: run full attention separately inside each window
    n = grid.tokens_per_window
    expected = np.concatenate(
        [full_attention_ref(q[i:i + n], k[i:i + n], v[i:i + n])
         for i in range(0, m, n)], axis=0)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_masked_single_visible_key_selects_value():
    q = RNG.standard_normal((3, 2))
    k = RNG.standard_normal((3, 2))
    v = RNG.standard_normal((3, 2))
    mask = np.eye(3, dtype=bool)
    assert np.allclose(masked_attention_ref(q, k, v, mask), v, atol=1e-15)


def test_masked_empty_row_rejected():
    mask = np.ones((2, 2), dtype=bool)
    mask[1] = False
    with pytest.raises(ConfigError, match="row 1"):
        masked_attention_ref(np.zeros((2, 2)), np.zeros((2, 2)),
                             np.zeros((2, 2)), mask)


def test_window_block_mask_structure():
    grid = WindowGrid((2, 2, 2), (2, 2, 2))
    assert window_block_mask(grid).all()
    grid = WindowGrid((2, 2, 2), (1, 1, 1))
    assert np.array_equal(window_block_mask(grid), np.eye(8, dtype=bool))


# ---------------------------------------------------------------------------
# adaptive average pooling
# ---------------------------------------------------------------------------

def test_pool_identity_target():
    x = RNG.standard_normal((2, 3, 4, 5))
    assert np.allclose(adaptive_avg_pool3d_ref(x, (2, 3, 4)), x, atol=1e-15)


def test_pool_global_mean():
    x = RNG.standard_normal((2, 4, 4, 3))
    out = adaptive_avg_pool3d_ref(x, (1, 1, 1))
    assert np.max(np.abs(out[0, 0, 0] - x.reshape(-1, 3).mean(axis=0))) < 1e-12


def test_pool_ones():
    out = adaptive_avg_pool3d_ref(np.ones((4, 4, 4, 2)), (2, 4, 1))
    assert np.allclose(out, 1.0, atol=1e-15)


def test_pool_divisibility_error():
    with pytest.raises(ShapeError, match="height"):
        adaptive_avg_pool3d_ref(np.ones((4, 4, 4, 1)), (2, 3, 2))


# ---------------------------------------------------------------------------
# conv2d reference
# ---------------------------------------------------------------------------

def test_conv2d_pointwise_identity():
    x = RNG.standard_normal((3, 4, 2))
    kernel = np.zeros((1, 1, 2, 2))
    kernel[0, 0] = np.eye(2)
    assert np.max(np.abs(conv2d_ref(x, kernel) - x)) < 1e-15


def test_conv2d_zero_kernel():
    out = conv2d_ref(RNG.standard_normal((4, 4, 3)), np.zeros((2, 2, 3, 1)))
    assert np.array_equal(out, np.zeros_like(out))


def test_conv2d_matches_depthwise_singleton_time():
    # per-channel kernels, collapsed onto the 3D depth-wise path with T=1
    c = 3
    x = RNG.standard_normal((6, 6, c))
    w = RNG.standard_normal((c, 2, 2))
    kernel3d = ConvKernel3D(w[:, None], stride=(1, 2, 2))
    out3d = depthwise_conv3d(x[None], kernel3d)[0]
    for ch in range(c):
        ref = conv2d_ref(x[:, :, ch:ch + 1], w[ch][:, :, None, None],
                         stride=(2, 2))
        assert np.max(np.abs(out3d[:, :, ch] - ref[:, :, 0])) < 1e-12


def test_conv2d_shape_error():
    with pytest.raises(ShapeError):
        conv2d_ref(np.zeros((3, 3, 2)), np.zeros((2, 2, 3, 1)))
