"""Forward/backward pairs for the layers of the two-head classifier.

Tensors are NHWC. Each ``*_forward`` returns ``(out, cache)`` and the
matching ``*_backward`` takes the upstream gradient and that cache.
"""
from __future__ import annotations

import numpy as np

from ..errors import BatchTooSmall, IndexOutOfRange, OddSpatialDim, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def he_normal(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """N(0, sqrt(2 / fan_in)); fan_in is the product of all but the last axis."""
    fan_in = int(np.prod(shape[:-1]))
    if fan_in <= 0:
        raise ValueError(f"cannot compute fan_in for shape {shape}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# --- convolution: 3x3, stride 1, zero padding 1


def conv2d_forward(x, w, b):
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeMismatch(f"conv2d: input {x.shape}, weights {w.shape}, bias {b.shape}")
    n, h, wd, c = x.shape
    f = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n * h * wd, f), dtype=np.result_type(x, w))
    out[:] = b
    # nine shifted matmuls; avoids materializing the 9x im2col buffer
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy : dy + h, dx : dx + wd, :].reshape(-1, c)
            out += patch @ w[dy, dx]
    return out.reshape(n, h, wd, f), (xp, w)


def conv2d_backward(dout, cache):
    xp, w = cache
    n, h, wd, f = dout.shape
    c = w.shape[2]
    d2 = dout.reshape(-1, f)
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy : dy + h, dx : dx + wd, :].reshape(-1, c)
            dw[dy, dx] = patch.T @ d2
            dxp[:, dy : dy + h, dx : dx + wd, :] += (d2 @ w[dy, dx].T).reshape(n, h, wd, c)
    db = d2.sum(axis=0)
    return dxp[:, 1:-1, 1:-1, :], dw, db


# --- dense


def dense_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# --- activations


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# --- 2x2 max pooling, stride 2


def maxpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = windows.argmax(axis=-1)  # first index wins ties
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(dout, cache):
    arg, shape = cache
    n, h, w, c = shape
    windows = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(windows, arg[..., None], dout[..., None], axis=-1)
    return windows.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


# --- batch normalization over every axis but the last


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Running statistics are updated in place when ``train`` is set."""
    axes = tuple(range(x.ndim - 1))
    if train:
        count = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] < 2:
            raise BatchTooSmall(f"batch norm in train mode needs batch >= 2, got {x.shape[0]}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var, count = running_mean, running_var, None
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, gamma, inv_std, train, axes, count)


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std, train, axes, count = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    dx = (inv_std / count) * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# --- dropout (inverted)


def dropout_forward(x, rate: float, train: bool, rng: np.random.Generator | None, spatial: bool):
    """Spatial mode drops whole channels per sample; otherwise single units."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],) if spatial else x.shape
    keep = (rng.random(shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


# --- softmax cross-entropy


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,) or targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise IndexOutOfRange(f"targets must be {n} indices in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_p[rows, targets].mean()
    grad = np.exp(log_p)
    grad[rows, targets] -= 1.0
    return float(loss), grad / n


def two_head_loss(seq_logits, plane_logits, seq_target, plane_target):
    """Sum of the two heads' mean cross-entropies, with per-head gradients."""
    seq_loss, dseq = softmax_cross_entropy(seq_logits, seq_target)
    plane_loss, dplane = softmax_cross_entropy(plane_logits, plane_target)
    return seq_loss + plane_loss, (dseq, dplane), (seq_loss, plane_loss)
