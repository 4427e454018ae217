"""Forward-op correctness against independent oracles.

The convolution oracle is a direct nested loop over output positions,
the pooling oracle scans windows one by one, and the normalization
oracle recomputes statistics with a two-pass formula. None of them
share code with the implementations under test.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unrollnet import ops
from unrollnet.ops import BnStats, ConvParams


def conv_oracle(x, w, bias, stride, pad):
    """Direct-loop cross-correlation."""
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, co, i, j] = (patch * w[co]).sum()
            if bias is not None:
                out[b, co] += bias[co]
    return out


def maxpool_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv2d_matches_direct_loop(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = ops.conv2d(x, ConvParams(w, b, stride, pad))
    want = conv_oracle(x, w, b, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_raises(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((4, 5, 3, 3))
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(x, ConvParams(w, None, 1, 1))


def test_conv2d_kernel_larger_than_input_raises(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    w = rng.standard_normal((4, 3, 5, 5))
    with pytest.raises(ValueError, match="smaller than kernel"):
        ops.conv2d(x, ConvParams(w, None, 1, 0))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 1), st.integers(1, 2))
def test_conv_deconv_adjointness(cin, cout, pad, stride):
    """<conv(x), y> == <x, deconv(y)> with shared weights, to 1e-10."""
    rng = np.random.default_rng(cin * 100 + cout * 10 + pad * 2 + stride)
    k = 3
    h = 8
    x = rng.standard_normal((2, cin, h, h))
    w = rng.standard_normal((cout, cin, k, k))
    p = ConvParams(w, None, stride, pad)
    cx = ops.conv2d(x, p)
    y = rng.standard_normal(cx.shape)
    lhs = float((cx * y).sum())
    rhs = float((x * ops.deconv2d(y, p, out_hw=(h, h))).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1.0)


def test_deconv2d_default_size_doubles_with_stride2(rng):
    y = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    out = ops.deconv2d(y, ConvParams(w, None, 2, 1))
    assert out.shape == (2, 3, 16, 16)


def test_deconv2d_rejects_bias(rng):
    y = rng.standard_normal((1, 4, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    with pytest.raises(ValueError, match="bias"):
        ops.deconv2d(y, ConvParams(w, np.zeros(3), 2, 1))


def test_deconv2d_geometry_mismatch_raises(rng):
    y = rng.standard_normal((1, 4, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    with pytest.raises(ValueError, match="geometry"):
        ops.deconv2d(y, ConvParams(w, None, 2, 1), out_hw=(17, 17))


def test_bn_stats_match_two_pass_oracle(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
    st_ = ops.compute_bn_stats(x)
    for c in range(3):
        vals = x[:, c].reshape(-1)
        mean = vals.sum() / vals.size
        var = ((vals - mean) ** 2).sum() / vals.size
        assert abs(st_.mean[c] - mean) < 1e-12
        assert abs(st_.var[c] - var) < 1e-12


def test_batchnorm_normalizes_to_zero_mean_unit_var(rng):
    x = rng.standard_normal((8, 4, 6, 6)) * 5 - 2
    y = ops.batchnorm(x, ops.compute_bn_stats(x))
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-4  # eps-limited


def test_batchnorm_affine_applies_scale_then_shift(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    stats = ops.compute_bn_stats(x)
    scale = np.array([2.0, 3.0, 4.0])
    shift = np.array([1.0, -1.0, 0.5])
    plain = ops.batchnorm(x, stats)
    affine = ops.batchnorm(x, BnStats(stats.mean, stats.var, stats.eps, scale, shift))
    want = plain * scale[None, :, None, None] + shift[None, :, None, None]
    np.testing.assert_allclose(affine, want, rtol=1e-12)


def test_batchnorm_channel_mismatch_raises(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    stats = BnStats(np.zeros(5), np.ones(5))
    with pytest.raises(ValueError, match="channel"):
        ops.batchnorm(x, stats)


def test_maxpool_matches_window_scan(rng):
    x = rng.standard_normal((3, 4, 8, 6))
    np.testing.assert_array_equal(ops.maxpool2x2(x), maxpool_oracle(x))


def test_maxpool_odd_size_raises(rng):
    with pytest.raises(ValueError, match="even"):
        ops.maxpool2x2(rng.standard_normal((1, 1, 5, 4)))


def test_global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y = ops.global_avg_pool(x)
    assert y.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(y[..., 0, 0], x.mean(axis=(2, 3)), rtol=1e-12)


def test_fully_connected_matches_per_sample_affine(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    w = rng.standard_normal((5, 12))
    b = rng.standard_normal(5)
    y = ops.fully_connected(x, w, b)
    for i in range(4):
        np.testing.assert_allclose(y[i], w @ x[i].reshape(-1) + b, rtol=1e-12)


def test_softmax_cross_entropy_against_log_formula(rng):
    logits = rng.standard_normal((6, 10)) * 4
    labels = rng.integers(0, 10, size=6)
    loss, _ = ops.softmax_cross_entropy(logits, labels)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(probs[np.arange(6), labels]).mean()
    assert abs(loss - want) < 1e-10


def test_softmax_cross_entropy_is_stable_for_huge_logits():
    logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    loss, grad = ops.softmax_cross_entropy(logits, np.array([0, 1]))
    assert np.isfinite(loss) and loss < 1e-6
    assert np.isfinite(grad).all()


def test_softmax_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        ops.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_add_shape_mismatch_raises(rng):
    with pytest.raises(ValueError, match="shape"):
        ops.add(rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 4)))


@given(st.integers(0, 2**31 - 1))
def test_relu_idempotent_and_nonnegative(seed):
    x = np.random.default_rng(seed).standard_normal((2, 2, 3, 3))
    y = ops.relu(x)
    assert (y >= 0).all()
    np.testing.assert_array_equal(ops.relu(y), y)


def test_conv2d_linear_in_input(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    p = ConvParams(w, None, 1, 1)
    a = rng.standard_normal((2, 3, 6, 6))
    b = rng.standard_normal((2, 3, 6, 6))
    np.testing.assert_allclose(
        ops.conv2d(a + b, p), ops.conv2d(a, p) + ops.conv2d(b, p), rtol=1e-10, atol=1e-12
    )


def test_he_init_statistics():
    fan_in = 3 * 3 * 16
    w = ops.he_init((16, 16, 3, 3), fan_in, rng_seed=7)
    target = np.sqrt(2.0 / fan_in)
    assert abs(w.std() - target) / target < 0.05
    assert abs(w.mean()) < target * 0.1


def test_he_init_deterministic():
    a = ops.he_init((4, 4), 16, rng_seed=3)
    b = ops.he_init((4, 4), 16, rng_seed=3)
    np.testing.assert_array_equal(a, b)
