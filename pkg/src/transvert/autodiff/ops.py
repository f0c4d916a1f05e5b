"""Differentiable operations used by the generator and discriminator."""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, make_result


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (undoing numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(x, y):
    x, y = as_tensor(x), as_tensor(y, like=x)
    try:
        out = x.data + y.data
    except ValueError as exc:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}") from exc

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return make_result(out, (x, y), backward, "add")


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y, like=x)
    try:
        out = x.data * y.data
    except ValueError as exc:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}") from exc

    def backward(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return make_result(out, (x, y), backward, "mul")


def scale(x, c):
    c = float(c)
    return make_result(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def sum(x):  # noqa: A001 - mirrors numpy naming
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // np.asarray(out).size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make_result(np.asarray(out), (x,), backward, "mean")


def relu(x):
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    # split by sign so exp never overflows
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def concat(xs, axis=1):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: shape mismatch {x.shape} vs {ref} on axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(xs), backward, "concat")


def conv3d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation with zero padding; weight layout (C_out, C_in, kd, kh, kw)."""
    stride, pad = kernels.triple(stride), kernels.triple(pad)
    out = kernels.conv3d_forward(x.data, w.data, None if b is None else b.data, stride, pad)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw = kernels.conv3d_backward(g, x.data, w.data, stride, pad, x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, parents, backward, "conv3d")


def conv_transpose3d(x, w, b=None, stride=1, pad=0, output_pad=0):
    """Adjoint of :func:`conv3d`; weight layout (C_in, C_out, kd, kh, kw)."""
    stride, pad, op = kernels.triple(stride), kernels.triple(pad), kernels.triple(output_pad)
    out = kernels.conv_transpose3d_forward(x.data, w.data, None if b is None else b.data, stride, pad, op)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw = kernels.conv_transpose3d_backward(g, x.data, w.data, stride, pad, op, x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, parents, backward, "conv_transpose3d")


def replication_pad3d(x, pad):
    pad = kernels.triple(pad)
    if min(pad) < 0:
        raise ValueError("replication_pad3d: padding must be non-negative")
    sp = x.shape[-3:]
    out = kernels.replication_pad3d(x.data, pad)
    return make_result(out, (x,), lambda g: (kernels.replication_pad3d_backward(g, pad, sp),), "replication_pad3d")


def batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalization over (N, D, H, W).

    In training mode ``running_mean``/``running_var`` (numpy arrays) are
    updated in place; the normalization itself uses the biased variance.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        m = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def _normalize(v, eps=1e-12):
    return v / max(float(np.linalg.norm(v)), eps)


def spectral_norm(w, u, power_iters=1, training=True):
    """Return ``w / sigma`` with sigma from power iteration on the persistent ``u``.

    ``w`` is viewed as (out_channels, rest). In training mode ``u`` (numpy,
    length out_channels) is updated in place; in eval mode it is only read.
    The gradient treats the singular vectors as constants.
    """
    w2 = w.data.reshape(w.shape[0], -1)
    if not np.any(w2):
        raise ValueError("spectral_norm: weight matrix is zero")
    uu = u.astype(w2.dtype)
    v = _normalize(w2.T @ uu)
    if training:
        for _ in range(max(1, power_iters)):
            v = _normalize(w2.T @ uu)
            uu = _normalize(w2 @ v)
        u[...] = uu
    sigma = float(uu @ (w2 @ v))
    if sigma == 0.0:
        raise ValueError("spectral_norm: estimated singular value is zero")
    out = (w.data / w.dtype.type(sigma)).astype(w.dtype)
    outer = np.outer(uu, v).reshape(w.shape)

    def backward(g):
        return ((g - (g * w.data).sum() / sigma * outer) / sigma,)

    return make_result(out, (w,), backward, "spectral_norm")


def l1_loss(a, b):
    """Mean absolute difference."""
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def backward(g):
        s = np.sign(d) * (g / n)
        return s, -s

    return make_result(np.asarray(np.abs(d).mean()), (a, b), backward, "l1_loss")


def squared_error(a, c):
    """Mean of (a - c)^2 against a scalar target ``c``."""
    if not np.isscalar(c) and np.ndim(c) != 0:
        raise ValueError("squared_error: target must be a scalar")
    d = a.data - a.dtype.type(c)
    n = d.size
    return make_result(np.asarray((d * d).mean()), (a,), lambda g: (2 * d * (g / n),), "squared_error")
