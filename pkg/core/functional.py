"""Differentiable layer primitives built on ``core.tensor``.

Convolutions use an im2col view (``sliding_window_view``) for the forward map and
a strided scatter for its adjoint. ``conv2d_transposed`` is that adjoint with a
bias, so the two ops share kernels and the inner-product identity holds exactly
up to floating-point reassociation.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import ShapeError
from .tensor import Tensor, as_tensor, note_branch


# -- convolution kernels (plain NumPy) -----------------------------------


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, Ho, Wo, kh, kw) view of the padded input."""
    view = sliding_window_view(_pad(x, pad), (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    cols = _windows(x, kh, kw, stride, pad)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``_conv_forward`` with respect to its input."""
    n, c, h, width = x_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    padded = np.zeros((n, c, h + 2 * pad, width + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(padded[:, :, pad:pad + h, pad:pad + width])


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, w_shape: Tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    kh, kw = w_shape[2:]
    cols = _windows(x, kh, kw, stride, pad)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv_shapes(x: Tensor, w: Tensor, in_axis: int, op: str, stride: int, pad: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input and 4-d weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but weight expects {w.shape[in_axis]}",
            details={"input": list(x.shape), "weight": list(w.shape)},
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"{op}: stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")


# -- layers ----------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, input NCHW and weight (O, I, kh, kw)."""
    _check_conv_shapes(x, weight, 1, "conv2d", stride, pad)
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {x.shape[2] + 2 * pad}x{x.shape[3] + 2 * pad}"
        )
    out = _conv_forward(x.data, weight.data, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(_conv_input_grad(g, weight.data, x.shape, stride, pad))
        if weight.requires_grad:
            weight.accumulate(_conv_weight_grad(x.data, g, weight.shape, stride, pad))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` for the same weight: (N, O, H, W) -> (N, I, (H-1)s - 2p + kh, ...)."""
    _check_conv_shapes(x, weight, 0, "conv2d_transposed", stride, pad)
    kh, kw = weight.shape[2:]
    out_h = (x.shape[2] - 1) * stride - 2 * pad + kh
    out_w = (x.shape[3] - 1) * stride - 2 * pad + kw
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_transposed: output would be {out_h}x{out_w}")
    out_shape = (x.shape[0], weight.shape[1], out_h, out_w)
    out = _conv_input_grad(x.data, weight.data, out_shape, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(_conv_forward(g, weight.data, stride, pad))
        if weight.requires_grad:
            weight.accumulate(_conv_weight_grad(g, x.data, weight.shape, stride, pad))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out[t] = weight @ x[t] + bias for x of shape (T, D_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match weight {weight.shape}")
    out = x.matmul(weight.transpose())
    return out if bias is None else out + bias


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dx_hat = g * gamma.data
            x.accumulate(
                inv_std * (
                    dx_hat
                    - dx_hat.mean(axis=-1, keepdims=True)
                    - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True)
                )
            )
        gamma.accumulate((g * x_hat).sum(axis=reduce_axes))
        beta.accumulate(g.sum(axis=reduce_axes))

    return Tensor.from_op(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x.accumulate(probs * (g - (g * probs).sum(axis=axis, keepdims=True)))

    return Tensor.from_op(probs, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data > 0
    note_branch(positive)
    out = np.where(positive, x.data, slope * x.data)
    return Tensor.from_op(out, (x,), lambda g: x.accumulate(np.where(positive, g, slope * g)))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor.from_op(out, (x,), lambda g: x.accumulate(g * out * (1.0 - out)))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of an NCHW tensor by an integer factor."""
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return Tensor.from_op(out, (x,), backward)


# -- losses ------------------------------------------------------------------


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference over all elements."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes differ {a.shape} vs {b.shape}")
    return (a - b).abs().mean()


def smooth_l1_loss(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss; quadratic below ``beta``, linear above."""
    diff = pred.data - target
    small = np.abs(diff) < beta
    note_branch(small)
    note_branch(diff > 0)
    values = np.where(small, 0.5 * diff ** 2 / beta, np.abs(diff) - 0.5 * beta)
    count = max(diff.size, 1)

    def backward(g: np.ndarray) -> None:
        pred.accumulate(g * np.where(small, diff / beta, np.sign(diff)) / count)

    return Tensor.from_op(np.asarray(values.sum() / count), (pred,), backward)


def binary_cross_entropy_with_logits(
    logits: Tensor,
    targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
    clamp: float = 50.0,
) -> Tensor:
    """Weighted mean BCE computed from logits in the log-sum-exp stable form.

    Logits are clamped to ``[-clamp, clamp]``; the clamp passes no gradient outside.
    """
    raw = logits.data
    x = np.clip(raw, -clamp, clamp)
    weights = np.ones_like(x) if weights is None else np.broadcast_to(weights, x.shape)
    total = weights.sum()
    values = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    inside = (raw > -clamp) & (raw < clamp)
    note_branch(inside)

    def backward(g: np.ndarray) -> None:
        logits.accumulate(g * weights * (expit(x) - targets) * inside / total)

    return Tensor.from_op(np.asarray((weights * values).sum() / total), (logits,), backward)


# -- structure ---------------------------------------------------------------


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis."""
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            t.accumulate(np.take(g, i, axis=axis))

    return Tensor.from_op(out, tuple(tensors), backward)
