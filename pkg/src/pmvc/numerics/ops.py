"""Differentiable operations on NHWC feature maps.

Convolutions use "same" zero padding (TensorFlow convention: output extent is
``ceil(size / stride)``; odd total padding puts the extra pixel after).
Transposed convolution is defined as the exact adjoint of the strided
convolution with the same weights, so its output extent is ``stride * size``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, as_tensor, check_finite, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        k = b

        def backward_scalar(g):
            return (g * k,)

        return make_result(a.data * k, (a,), backward_scalar)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return make_result(x.data * x.data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return make_result(out, (x,), backward)


def hardtanh(x: Tensor) -> Tensor:
    """clip(x, -1, 1); gradient 1 strictly inside the range, 0 outside."""
    mask = np.abs(x.data) < 1

    def backward(g):
        return (g * mask,)

    return make_result(np.clip(x.data, -1, 1).astype(x.dtype), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out.astype(x.dtype), (x,), backward)


def activation(x: Tensor, kind: str | None) -> Tensor:
    if kind is None or kind == "none":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "hardtanh":
        return hardtanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and structure


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def mse(a: Tensor, b) -> Tensor:
    """Mean of the elementwise squared difference."""
    return mean(square(sub(a, b)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if other != first:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return make_result(out, tensors, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        if _needs_add_at(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def _needs_add_at(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of an NHWC tensor."""
    n, h, w, _ = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop region ({top},{left},{height},{width}) outside {h}x{w}")
    return index(x, (slice(None), slice(top, top + height), slice(left, left + width), slice(None)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward)


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``; backward passes the gradient to ``x`` unchanged."""
    if value.shape != x.shape:
        raise ShapeError("straight_through: value shape differs from input")

    def backward(g):
        return (g,)

    return make_result(value.astype(x.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# convolution machinery


def same_padding(size: int, kernel: int, stride: int, dilation: int = 1) -> tuple[int, int, int]:
    """Return (output extent, pad before, pad after) for "same" padding."""
    effective = (kernel - 1) * dilation + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + effective - size, 0)
    return out, total // 2, total - total // 2


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
        writeable=False,
    )


def _scatter_windows(
    cols: np.ndarray, padded_shape: tuple[int, ...], kh: int, kw: int, stride: int, dilation: int
) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window contributions back onto the grid."""
    n, ho, wo = cols.shape[:3]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i * dilation : i * dilation + h_span : stride, j * dilation : j * dilation + w_span : stride, :] += cols[
                :, :, :, i, j, :
            ]
    return out


def _geometry(h: int, w: int, kh: int, kw: int, stride: int, dilation: int):
    ho, pt, pb = same_padding(h, kh, stride, dilation)
    wo, pl, pr = same_padding(w, kw, stride, dilation)
    return ho, wo, (pt, pb, pl, pr)


def _pad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _unpad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    return x[:, pt : x.shape[1] - pb, pl : x.shape[2] - pr, :]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1,
           name: str = "conv2d") -> Tensor:
    """NHWC convolution with HWIO weights and "same" zero padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = weight.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"{name}: input has {c} channels, weights expect {cin}")
    ho, wo, pads = _geometry(h, w, kh, kw, stride, dilation)
    xp = _pad(x.data, pads)
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    check_finite(out, name)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # one small matmul per tap keeps every intermediate contiguous
            gxp = np.zeros(padded_shape, dtype=g2.dtype)
            h_span, w_span = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    tap = (g2 @ weight.data[i, j].T).reshape(n, ho, wo, cin)
                    gxp[:, i * dilation : i * dilation + h_span : stride,
                        j * dilation : j * dilation + w_span : stride, :] += tap
            gx = _unpad(gxp, pads)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     name: str = "deconv2d") -> Tensor:
    """Adjoint of :func:`conv2d`.

    ``weight`` has shape (kh, kw, out_channels, in_channels): it is the weight
    of the forward convolution mapping the (stride x larger) output back onto
    ``x``. Output spatial extent is ``stride * input``.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected NHWC input, got shape {x.shape}")
    kh, kw, cout, cin = weight.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"{name}: input has {c} channels, weights expect {cin}")
    H, W = h * stride, w * stride
    ho, wo, pads = _geometry(H, W, kh, kw, stride, 1)
    assert (ho, wo) == (h, w)
    wmat = weight.data.reshape(kh * kw * cout, cin)
    x2 = x.data.reshape(-1, cin)
    dcols = (x2 @ wmat.T).reshape(n, h, w, kh, kw, cout)
    padded_shape = (n, H + pads[0] + pads[1], W + pads[2] + pads[3], cout)
    out = _unpad(_scatter_windows(dcols, padded_shape, kh, kw, stride, 1), pads)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data
    check_finite(out, name)

    def backward(g):
        gp = _pad(g, pads)
        cols = _windows(gp, kh, kw, stride, 1, h, w).reshape(n * h * w, kh * kw * cout)
        gx = (cols @ wmat).reshape(x.shape) if x.requires_grad else None
        gw = (cols.T @ x2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def avg_pool(x: Tensor, size: int, stride: int) -> Tensor:
    """Average pooling with "same" geometry; padded cells are excluded from the mean."""
    n, h, w, c = x.shape
    ho, wo, pads = _geometry(h, w, size, size, stride, 1)
    xp = _pad(x.data, pads)
    ones = _pad(np.ones((1, h, w, 1), dtype=x.dtype), pads)
    count = _windows(ones, size, size, stride, 1, ho, wo).sum(axis=(3, 4))
    out = _windows(xp, size, size, stride, 1, ho, wo).sum(axis=(3, 4)) / count
    padded_shape = xp.shape

    def backward(g):
        per_cell = (g / count)[:, :, :, None, None, :]
        cols = np.broadcast_to(per_cell, (n, ho, wo, size, size, c))
        return (_unpad(_scatter_windows(cols, padded_shape, size, size, stride, 1), pads),)

    return make_result(out.astype(x.dtype), (x,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    axes = (0, 1, 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[-1]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = (gamma.data * xhat + beta.data).astype(x.dtype)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            m = x.data.size // x.shape[-1]
            gx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv_std
        return gx.astype(x.dtype), ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)
