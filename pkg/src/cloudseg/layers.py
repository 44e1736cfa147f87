"""Differentiable layer primitives: convolution, transposed convolution,
ReLU, 2x2 max pooling, batch normalization, and the mean-squared-error loss.

Everything here is written directly against numpy. Convolutions gather
sliding windows with stride tricks and contract them with a single
``tensordot`` (an im2col-style lowering); the matching backward passes are
hand-derived and are checked against central finite differences in the
test suite (see ``gradcheck``). A slow nested-loop convolution oracle lives
in the tests, not here.

Shape convention throughout: (batch, channels, rows, cols).

Transposed convolutions are implemented as the exact adjoint of a strided
convolution: ``deconv(W) = conv(W)^T`` as linear maps, so a stride-s layer
maps h x w feature maps to s*h x s*w.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ArgumentError, ShapeError
from .tensor import Tensor4


@dataclass
class ConvParams:
    """Weights for one (possibly dilated or transposed) convolution.

    ``weights`` is (out_ch, in_ch, r, r) for a normal convolution and
    (in_ch, out_ch, r, r) for a transposed one (the adjoint reads the same
    array from the other side). ``bias`` always has one entry per output
    channel.
    """

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got {self.weights.shape}")
        if self.dilation < 1:
            raise ArgumentError(f"dilation must be >= 1, got {self.dilation}")
        if self.transposed and self.dilation != 1:
            raise ArgumentError("transposed convolutions do not support dilation")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.out_channels} output channels"
            )

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] if not self.transposed else self.weights.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0] if not self.transposed else self.weights.shape[1]

    @property
    def padding(self) -> int:
        # normal conv: zero padding that preserves h, w at stride 1;
        # transposed: padding of the underlying strided conv, chosen so the
        # adjoint maps h -> stride*h exactly.
        r = self.kernel_size
        if self.transposed:
            return (r - self.stride + 1) // 2
        return self.dilation * (r - 1) // 2


@dataclass
class BNParams:
    """Per-channel batch-normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if not (0.0 < self.momentum < 1.0):
            raise ArgumentError(f"momentum must be in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ArgumentError(f"epsilon must be > 0, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ArgumentError("running variance must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")


def _pad2d(x: Tensor4, p: int) -> Tensor4:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x_pad: Tensor4, r: int, stride: int, dilation: int) -> np.ndarray:
    """Sliding (r, r) windows as a zero-copy strided view.

    Returns shape (n, c, out_h, out_w, r, r) where window (u, v) starts at
    padded position (u*stride, v*stride) and taps are dilation apart.
    """
    n, c, hp, wp = x_pad.shape
    span = dilation * (r - 1) + 1
    out_h = (hp - span) // stride + 1
    out_w = (wp - span) // stride + 1
    sn, sc, sh, sw = x_pad.strides
    return as_strided(
        x_pad,
        shape=(n, c, out_h, out_w, r, r),
        strides=(sn, sc, stride * sh, stride * sw, dilation * sh, dilation * sw),
        writeable=False,
    )


def _gather(x: Tensor4, w: np.ndarray, stride: int, pad: int, dilation: int) -> Tensor4:
    """Strided/dilated convolution of x with filters w (no bias)."""
    x_pad = _pad2d(x, pad)
    win = _windows(x_pad, w.shape[2], stride, dilation)
    # (n, c, u, v, i, j) x (k, c, i, j) -> (n, u, v, k)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# fast path for stride-1 convolutions
#
# Works in flattened padded coordinates: shifting a padded (HP, WP) plane by
# (di, dj) is a constant flat offset di*WP + dj, and because the padding
# absorbs column shifts, every core pixel's contribution lands at exactly the
# right place. Each kernel tap then becomes one batched GEMM over channels on
# a contiguous slice -- no im2col materialization at all. Positions beyond
# the core columns accumulate junk and are cropped at the end.
# ---------------------------------------------------------------------------

def _embed_rows(y: Tensor4, wp: int) -> np.ndarray:
    """Embed (n, k, h, w) into row pitch wp with zeroed gap columns."""
    n, k, h, w = y.shape
    out = np.zeros((n, k, h, wp), dtype=y.dtype)
    out[:, :, :, :w] = y
    return out.reshape(n, k, h * wp)


def _conv1_forward(x: Tensor4, w: np.ndarray, pad: int, dilation: int) -> Tensor4:
    n, c, h, ww = x.shape
    k, _, r, _ = w.shape
    wp = ww + 2 * pad
    x_flat = _pad2d(x, pad).reshape(n, c, -1)
    span = (h - 1) * wp + ww
    y = np.zeros((n, k, h * wp), dtype=x.dtype)
    tmp = np.empty((n, k, span), dtype=x.dtype)
    core = y[:, :, :span]
    w_taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # BLAS wants unit strides
    for i in range(r):
        for j in range(r):
            off = i * dilation * wp + j * dilation
            np.matmul(w_taps[i, j], x_flat[:, :, off:off + span], out=tmp)
            core += tmp
    return np.ascontiguousarray(y.reshape(n, k, h, wp)[:, :, :, :ww])


def _conv1_dx(dy_flat: np.ndarray, w: np.ndarray, pad: int, dilation: int,
              in_shape) -> Tensor4:
    n, c, h, ww = in_shape
    k, _, r, _ = w.shape
    wp = ww + 2 * pad
    hp = h + 2 * pad
    span = (h - 1) * wp + ww
    dx = np.zeros((n, c, hp * wp), dtype=dy_flat.dtype)
    tmp = np.empty((n, c, span), dtype=dy_flat.dtype)
    src = dy_flat[:, :, :span]
    w_taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (r, r, c, k)
    for i in range(r):
        for j in range(r):
            off = i * dilation * wp + j * dilation
            np.matmul(w_taps[i, j], src, out=tmp)
            dx[:, :, off:off + span] += tmp
    dx = dx.reshape(n, c, hp, wp)
    if pad == 0:
        return dx
    return np.ascontiguousarray(dx[:, :, pad:pad + h, pad:pad + ww])


def _conv1_dw(x: Tensor4, dy_flat: np.ndarray, k: int, r: int, pad: int,
              dilation: int) -> np.ndarray:
    n, c, h, ww = x.shape
    wp = ww + 2 * pad
    x_flat = _pad2d(x, pad).reshape(n, c, -1)
    span = (h - 1) * wp + ww
    dw = np.empty((k, c, r, r), dtype=x.dtype)
    src = dy_flat[:, :, :span]
    for i in range(r):
        for j in range(r):
            off = i * dilation * wp + j * dilation
            # (n, k, span) x (n, span, c) -> (n, k, c), summed over the batch
            prod = np.matmul(src, x_flat[:, :, off:off + span].swapaxes(1, 2))
            dw[:, :, i, j] = prod.sum(axis=0)
    return dw


def _scatter(t: Tensor4, w: np.ndarray, stride: int, pad: int, dilation: int,
             out_hw: tuple[int, int]) -> Tensor4:
    """Adjoint of :func:`_gather`: distribute t back onto an input-shaped grid.

    t has shape (n, k, u, v); w is (k, c, r, r); result is (n, c, *out_hw).
    """
    n, k, oh, ow = t.shape
    _, c, r, _ = w.shape
    hh, ww = out_hw
    # one GEMM: (n, u, v, k) x (k, c, i, j) -> (n, u, v, c, i, j)
    contrib = np.tensordot(t.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    z = np.zeros((n, c, hh + 2 * pad, ww + 2 * pad), dtype=t.dtype)
    if dilation == 1 and r % stride == 0 and (hh + 2 * pad) % stride == 0:
        # group taps by output phase: tap i writes phase i % stride at block
        # offset i // stride, so q x q whole-array adds replace the tap loop
        q = r // stride
        cr = contrib.reshape(n, oh, ow, c, q, stride, q, stride)
        cr = cr.transpose(0, 3, 4, 6, 1, 5, 2, 7)  # (n, c, qi, qj, u, a, v, b)
        zv = z.reshape(n, c, (hh + 2 * pad) // stride, stride,
                       (ww + 2 * pad) // stride, stride)
        for qi in range(q):
            for qj in range(q):
                zv[:, :, qi:qi + oh, :, qj:qj + ow, :] += cr[:, :, qi, qj]
    else:
        contrib_t = np.ascontiguousarray(contrib.transpose(0, 3, 4, 5, 1, 2))
        for i in range(r):
            ys = i * dilation
            for j in range(r):
                xs = j * dilation
                z[:, :, ys:ys + stride * (oh - 1) + 1:stride,
                     xs:xs + stride * (ow - 1) + 1:stride] += contrib_t[:, :, i, j]
    if pad == 0:
        return z
    return np.ascontiguousarray(z[:, :, pad:pad + hh, pad:pad + ww])


def conv2d_forward(x: Tensor4, p: ConvParams) -> Tensor4:
    """Stride-1 same-padding convolution; output h, w equal input h, w."""
    if p.transposed:
        raise ArgumentError("use deconv2d_forward for transposed layers")
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, filters expect {p.in_channels}"
        )
    y = _conv1_forward(x, p.weights, p.padding, p.dilation)
    y += p.bias.astype(y.dtype)[None, :, None, None]
    return y


def conv2d_backward(x: Tensor4, p: ConvParams, grad_out: Tensor4):
    """Gradients of a stride-1 same-padding convolution.

    Returns (d_input, d_weights, d_bias).
    """
    if grad_out.shape != (x.shape[0], p.out_channels, x.shape[2], x.shape[3]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output"
        )
    d_bias = grad_out.sum(axis=(0, 2, 3))
    dy_flat = _embed_rows(grad_out, x.shape[3] + 2 * p.padding)
    d_weights = _conv1_dw(x, dy_flat, p.out_channels, p.kernel_size,
                          p.padding, p.dilation)
    d_input = _conv1_dx(dy_flat, p.weights, p.padding, p.dilation, x.shape)
    return d_input, d_weights, d_bias


def deconv2d_forward(x: Tensor4, p: ConvParams) -> Tensor4:
    """Stride-s transposed convolution; maps h x w to s*h x s*w.

    Exactly the adjoint of a stride-s convolution with the same weights,
    plus a per-output-channel bias.
    """
    if not p.transposed:
        raise ArgumentError("deconv2d_forward requires transposed ConvParams")
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, transposed filters expect {p.in_channels}"
        )
    s = p.stride
    out_hw = (s * x.shape[2], s * x.shape[3])
    y = _scatter(x, p.weights, stride=s, pad=p.padding, dilation=1, out_hw=out_hw)
    y += p.bias.astype(y.dtype)[None, :, None, None]
    return y


def deconv2d_backward(x: Tensor4, p: ConvParams, grad_out: Tensor4):
    """Gradients of the transposed convolution: (d_input, d_weights, d_bias)."""
    s = p.stride
    expected = (x.shape[0], p.out_channels, s * x.shape[2], s * x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    d_bias = grad_out.sum(axis=(0, 2, 3))
    g_pad = _pad2d(grad_out, p.padding)
    win = _windows(g_pad, p.kernel_size, s, 1)
    # (n, k, u, v) x (n, c, u, v, i, j) -> (k, c, i, j)
    d_weights = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    # adjoint of the adjoint: a plain strided gather
    d_input = _gather(grad_out, p.weights, stride=s, pad=p.padding, dilation=1)
    return d_input, d_weights, d_bias


def relu_forward(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0)


def relu_backward(x: Tensor4, grad_out: Tensor4) -> Tensor4:
    # gradient at exactly 0 is defined as 0
    return grad_out * (x > 0)


def maxpool_forward(x: Tensor4):
    """2x2 max pooling with stride 2.

    Returns (pooled, indices) where indices holds the row-major in-window
    argmax (0..3); ties go to the first occurrence.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = r.reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward(indices: np.ndarray, grad_out: Tensor4) -> Tensor4:
    """Route gradients to the stored argmax positions, zero elsewhere."""
    if grad_out.shape != indices.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match indices {indices.shape}"
        )
    n, c, oh, ow = grad_out.shape
    g = np.zeros((n, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, indices[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, 2 * oh, 2 * ow))


def batchnorm_forward(x: Tensor4, p: BNParams, mode: str):
    """Per-channel batch normalization over (batch, rows, cols).

    Train mode normalizes with batch statistics, applies gamma/beta, and
    updates the running statistics in place with the configured momentum
    (new_running = momentum * running + (1 - momentum) * batch). Eval mode
    uses the running statistics only and returns no cache.

    Returns (y, cache); cache is None in eval mode.
    """
    _check_mode(mode)
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, BN expects {p.channels}")
    gamma = p.gamma[None, :, None, None]
    beta = p.beta[None, :, None, None]
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        y = (x - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return y * gamma + beta, None
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma + beta
    p.running_mean *= p.momentum
    p.running_mean += (1.0 - p.momentum) * mean
    p.running_var *= p.momentum
    p.running_var += (1.0 - p.momentum) * var
    cache = (xhat, inv_std, p.gamma)
    return y, cache


def batchnorm_backward(cache, grad_out: Tensor4):
    """Gradients of train-mode batch normalization.

    Returns (d_input, d_gamma, d_beta).
    """
    if cache is None:
        raise ArgumentError("batchnorm_backward needs a train-mode cache")
    xhat, inv_std, gamma = cache
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {xhat.shape}")
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    d_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    d_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma[None, :, None, None]
    d_input = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return d_input, d_gamma, d_beta


def mse_loss(pred: Tensor4, target: Tensor4, reduction: str = "per_element"):
    """Mean-squared error and its gradient with respect to pred.

    ``per_element`` divides by the total element count (batch * elements
    per sample), so the gradient scale does not depend on patch size.
    ``per_sample`` divides by the batch size only.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if reduction == "per_element":
        denom = pred.size
    elif reduction == "per_sample":
        denom = pred.shape[0]
    else:
        raise ArgumentError(f"unknown reduction {reduction!r}")
    diff = pred - target
    loss = float(np.vdot(diff, diff)) / denom
    grad = (2.0 / denom) * diff
    return loss, grad
