"""Dense 4-D tensor primitives with hand-written backward passes.

All activations live in (batch, channels, height, width) arrays. Every
operation is a pure function: inputs are never mutated, and each forward
op has a matching ``*_backward`` that maps an output gradient to input
and parameter gradients. Convolution is cross-correlation (no kernel
flip) built on im2col + GEMM; transposed convolution is its exact
adjoint, sharing the same parameter object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

BN_EPSILON = 1e-5


@dataclass(frozen=True)
class ConvParams:
    """Convolution weights plus geometry.

    weights has shape (out_channels, in_channels, kh, kw). The same
    object parameterizes both conv2d and its adjoint deconv2d: the
    adjoint consumes out_channels-shaped data and produces
    in_channels-shaped data.
    """

    weights: Array
    bias: Array | None = None
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(frozen=True)
class BnStats:
    """Per-channel normalization statistics.

    scale/shift are the optional learnable affine parameters; they stay
    None everywhere except the final classifier-head normalization.
    """

    mean: Array
    var: Array
    eps: float = BN_EPSILON
    scale: Array | None = None
    shift: Array | None = None


def _check_4d(x: Array, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (N,C,H,W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has a zero-sized dimension: {x.shape}")


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: Array, kh: int, kw: int, stride: int, oh: int, ow: int) -> Array:
    """Lay out every receptive field of a padded input as a matrix row.

    Returns (N*oh*ow, C*kh*kw); the column order (c, i, j) matches a
    row-major reshape of (out_c, in_c, kh, kw) weights.
    """
    n, c = xp.shape[0], xp.shape[1]
    col6 = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            col6[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return col6.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def _col2im(
    cols: Array, n: int, c: int, hp: int, wp: int, kh: int, kw: int, stride: int, oh: int, ow: int
) -> Array:
    """Adjoint of _im2col: scatter-add matrix rows back onto the padded canvas."""
    col6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col6[:, :, i, j]
    return img


def _pad(x: Array, pad: int) -> Array:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Array, p: ConvParams) -> Array:
    """Cross-correlate x with p.weights; add bias per output channel if set."""
    _check_4d(x, "input")
    n, c, h, w = x.shape
    kh, kw = p.kernel
    if c != p.in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, weights expect {p.in_channels}"
        )
    if h + 2 * p.padding < kh or w + 2 * p.padding < kw:
        raise ValueError(
            f"conv2d spatial underflow: padded input {h + 2 * p.padding}x{w + 2 * p.padding} "
            f"smaller than kernel {kh}x{kw}"
        )
    oh = _conv_out_size(h, kh, p.stride, p.padding)
    ow = _conv_out_size(w, kw, p.stride, p.padding)
    cols = _im2col(_pad(x, p.padding), kh, kw, p.stride, oh, ow)
    w_flat = p.weights.reshape(p.out_channels, -1)
    out = cols @ w_flat.T
    if p.bias is not None:
        out = out + p.bias
    return out.reshape(n, oh, ow, p.out_channels).transpose(0, 3, 1, 2)


def conv2d_backward(dy: Array, x: Array, p: ConvParams) -> tuple[Array, Array, Array | None]:
    """Gradients of conv2d w.r.t. input, weights and bias."""
    n, c, h, w = x.shape
    kh, kw = p.kernel
    oh, ow = dy.shape[2], dy.shape[3]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, p.out_channels)
    cols = _im2col(_pad(x, p.padding), kh, kw, p.stride, oh, ow)
    dw = (dy_mat.T @ cols).reshape(p.weights.shape)
    db = dy_mat.sum(axis=0) if p.bias is not None else None
    w_flat = p.weights.reshape(p.out_channels, -1)
    dcols = dy_mat @ w_flat
    hp, wp = h + 2 * p.padding, w + 2 * p.padding
    dxp = _col2im(dcols, n, c, hp, wp, kh, kw, p.stride, oh, ow)
    dx = dxp[:, :, p.padding : p.padding + h, p.padding : p.padding + w]
    return dx, dw, db


def _deconv_out_hw(y: Array, p: ConvParams, out_hw: tuple[int, int] | None) -> tuple[int, int]:
    if out_hw is not None:
        return out_hw
    # Default recovers the conv input size whenever 0 < k - 2*pad <= stride,
    # which holds for the 3x3/pad-1 and 1x1/pad-0 geometries used here.
    return p.stride * y.shape[2], p.stride * y.shape[3]


def deconv2d(y: Array, p: ConvParams, out_hw: tuple[int, int] | None = None) -> Array:
    """Adjoint of conv2d with the same parameters.

    Satisfies <conv2d(x, p), y> == <x, deconv2d(y, p)> for matching
    shapes. Input carries p.out_channels channels, output carries
    p.in_channels. out_hw overrides the default stride*input size.
    """
    _check_4d(y, "input")
    if p.bias is not None:
        raise ValueError("deconv2d expects bias-free params; bias is not part of the adjoint")
    n, c, hy, wy = y.shape
    if c != p.out_channels:
        raise ValueError(
            f"deconv2d channel mismatch: input has {c} channels, weights expect {p.out_channels}"
        )
    h, w = _deconv_out_hw(y, p, out_hw)
    kh, kw = p.kernel
    if _conv_out_size(h, kh, p.stride, p.padding) != hy or _conv_out_size(w, kw, p.stride, p.padding) != wy:
        raise ValueError(
            f"deconv2d geometry mismatch: target {h}x{w} does not convolve back to {hy}x{wy}"
        )
    y_mat = y.transpose(0, 2, 3, 1).reshape(n * hy * wy, p.out_channels)
    cols = y_mat @ p.weights.reshape(p.out_channels, -1)
    hp, wp = h + 2 * p.padding, w + 2 * p.padding
    xp = _col2im(cols, n, p.in_channels, hp, wp, kh, kw, p.stride, hy, wy)
    return xp[:, :, p.padding : p.padding + h, p.padding : p.padding + w]


def deconv2d_backward(
    dout: Array, y: Array, p: ConvParams, out_hw: tuple[int, int] | None = None
) -> tuple[Array, Array]:
    """Gradients of deconv2d w.r.t. its input and the shared weights."""
    n, _, hy, wy = y.shape
    kh, kw = p.kernel
    dy = conv2d(dout, ConvParams(p.weights, None, p.stride, p.padding))
    cols = _im2col(_pad(dout, p.padding), kh, kw, p.stride, hy, wy)
    y_mat = y.transpose(0, 2, 3, 1).reshape(n * hy * wy, p.out_channels)
    dw = (y_mat.T @ cols).reshape(p.weights.shape)
    return dy, dw


def relu(x: Array) -> Array:
    return np.maximum(x, 0)


def relu_backward(dy: Array, x: Array) -> Array:
    return dy * (x > 0)


def add(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def compute_bn_stats(batch: Array, eps: float = BN_EPSILON) -> BnStats:
    """Per-channel mean and biased variance over batch and spatial axes."""
    _check_4d(batch, "batch")
    mean = batch.mean(axis=(0, 2, 3))
    var = batch.var(axis=(0, 2, 3))
    return BnStats(mean=mean, var=var, eps=eps)


def batchnorm(x: Array, stats: BnStats) -> Array:
    """Normalize per channel with the given statistics, then affine if present."""
    _check_4d(x, "input")
    c = x.shape[1]
    if stats.mean.shape[0] != c or stats.var.shape[0] != c:
        raise ValueError(
            f"batchnorm channel mismatch: input has {c} channels, "
            f"stats carry {stats.mean.shape[0]}"
        )
    inv = 1.0 / np.sqrt(stats.var + stats.eps)
    xhat = (x - stats.mean[None, :, None, None]) * inv[None, :, None, None]
    if stats.scale is not None:
        xhat = xhat * stats.scale[None, :, None, None]
    if stats.shift is not None:
        xhat = xhat + stats.shift[None, :, None, None]
    return xhat


def batchnorm_backward(
    dy: Array, x: Array, stats: BnStats
) -> tuple[Array, Array | None, Array | None]:
    """Backward for batchnorm with statistics held constant (eval mode)."""
    inv = 1.0 / np.sqrt(stats.var + stats.eps)
    xhat = (x - stats.mean[None, :, None, None]) * inv[None, :, None, None]
    dshift = dy.sum(axis=(0, 2, 3)) if stats.shift is not None else None
    dscale = (dy * xhat).sum(axis=(0, 2, 3)) if stats.scale is not None else None
    dxhat = dy if stats.scale is None else dy * stats.scale[None, :, None, None]
    dx = dxhat * inv[None, :, None, None]
    return dx, dscale, dshift


def batchnorm_train_backward(
    dy: Array, x: Array, stats: BnStats
) -> tuple[Array, Array | None, Array | None]:
    """Backward for batchnorm whose statistics were computed from x itself.

    Propagates through the batch mean and variance, so finite-difference
    checks of the composite batchnorm(x, compute_bn_stats(x)) agree.
    """
    m = x.shape[0] * x.shape[2] * x.shape[3]
    inv = (1.0 / np.sqrt(stats.var + stats.eps))[None, :, None, None]
    xhat = (x - stats.mean[None, :, None, None]) * inv
    dshift = dy.sum(axis=(0, 2, 3)) if stats.shift is not None else None
    dscale = (dy * xhat).sum(axis=(0, 2, 3)) if stats.scale is not None else None
    dxhat = dy if stats.scale is None else dy * stats.scale[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = inv / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dscale, dshift


def maxpool2x2(x: Array) -> Array:
    """2x2 max pooling with stride 2; spatial sizes must be even."""
    _check_4d(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial sizes, got {h}x{w}")
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return xr.max(axis=(3, 5))


def maxpool2x2_backward(dy: Array, x: Array) -> Array:
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    windows = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)
    dwin = np.zeros_like(windows)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def global_avg_pool(x: Array) -> Array:
    """Spatial mean per channel; output shape (N, C, 1, 1)."""
    _check_4d(x, "input")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(dy: Array, x_shape: tuple[int, ...]) -> Array:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


def fully_connected(x: Array, weights: Array, bias: Array) -> Array:
    """Affine map per batch element; x is flattened to (N, features)."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weights.shape[1]:
        raise ValueError(
            f"fully_connected dimension mismatch: input has {x2.shape[1]} features, "
            f"weights expect {weights.shape[1]}"
        )
    return x2 @ weights.T + bias


def fully_connected_backward(dy: Array, x: Array, weights: Array) -> tuple[Array, Array, Array]:
    x2 = x.reshape(x.shape[0], -1)
    dx = (dy @ weights).reshape(x.shape)
    dw = dy.T @ x2
    db = dy.sum(axis=0)
    return dx, dw, db


def softmax_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Stabilized by max subtraction; gradient is (softmax - onehot) / N.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float((lse[np.arange(n), 0] - z[np.arange(n), labels]).mean())
    probs = np.exp(z - lse)
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def he_init(shape: tuple[int, ...], fan_in: int, rng_seed: int) -> Array:
    """Zero-mean Gaussian draw with std sqrt(2 / fan_in); deterministic per seed."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    rng = np.random.default_rng(rng_seed)
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
