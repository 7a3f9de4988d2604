"""Differentiable operations.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.special import erf

from . import kernels
from .tensor import NumericError, ShapeError, Tensor, as_tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _cast(x, like: np.ndarray):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _cast(a, b.data)
    b = _cast(b, a.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _cast(a, b.data)
    b = _cast(b, a.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _cast(a, b.data)
    b = _cast(b, a.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _cast(a, b.data)
    b = _cast(b, a.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return Tensor._make(ad ** exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias, with weight of shape (in, out).

    Leading axes of ``x`` are flattened into one GEMM, which is much faster
    than a broadcast batched matmul.
    """
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} does not match weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "linear")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return Tensor._make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


# ------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward value of ``z_q``; gradient copied unchanged to ``z_e``."""
    if z_e.shape != z_q.shape:
        raise ShapeError(f"straight_through shapes differ: {z_e.shape} vs {z_q.shape}")
    return Tensor._make(np.array(z_q.data), (z_e,), lambda g: (g,), "straight_through")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows there."""
    keep = ~np.broadcast_to(mask, a.shape)
    out = np.where(keep, a.data, np.asarray(value, dtype=a.dtype))
    return Tensor._make(out, (a,), lambda g: (g * keep,), "masked_fill")


# ------------------------------------------------------------- nonlinearities

def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._make((x * cdf).astype(x.dtype, copy=False), (a,), bw, "gelu")


def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{what}: NaN in input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = a.data
    _check_finite(x, "softmax")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite(x, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax(logits)[target].

    Args:
        logits: (..., V) scores.
        targets: integer indices with shape ``logits.shape[:-1]``.
    """
    x = logits.data
    _check_finite(x, "cross_entropy")
    targets = np.asarray(targets)
    vocab = x.shape[-1]
    if targets.shape != x.shape[:-1]:
        raise ShapeError(f"cross_entropy targets {targets.shape} vs logits {x.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy target outside [0, {vocab})")
    flat = x.reshape(-1, vocab)
    t = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(flat.shape[0])
    count = flat.shape[0]
    loss = -logp[rows, t].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((p * (g / count)).reshape(x.shape),)

    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) if x.requires_grad else None
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return Tensor._make(out, (x, gain, bias), bw, "layer_norm")


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``."""
    idx = np.asarray(indices)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding index outside [0, {vocab})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._make(table.data[idx], (table,), bw, "embedding")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def mse(x: Tensor, y) -> Tensor:
    y = _cast(y, x.data)
    diff = x.data - y.data
    n = diff.size

    def bw(g):
        gx = g * 2.0 * diff / n
        return gx, -gx

    return Tensor._make(np.asarray((diff * diff).mean(), dtype=x.dtype), (x, y), bw, "mse")


# ------------------------------------------------------------- convolutions

def _check_conv_args(stride: int, padding: int) -> None:
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation.

    Args:
        x: (N, C, D, H, W).
        weight: (Cout, C, k, k, k), cubic kernels only.
        bias: optional (Cout,).

    Returns:
        (N, Cout, oD, oH, oW) with o = floor((in + 2*pad - k) / stride) + 1.
    """
    _check_conv_args(stride, padding)
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernel, got {xd.shape} and {wd.shape}")
    n, c = xd.shape[:2]
    cout, cin, k = wd.shape[:3]
    if cin != c:
        raise ShapeError(f"conv3d channel mismatch: input {xd.shape}, kernel {wd.shape}")
    if any(s + 2 * padding < k for s in xd.shape[2:]):
        raise ShapeError(f"conv3d kernel {k} exceeds padded input {xd.shape[2:]}")
    # patches are gathered channels-last so each kernel row is a contiguous run
    x_cl = np.ascontiguousarray(xd.transpose(0, 2, 3, 4, 1))
    cols = kernels.im2col3d(x_cl, k, stride, padding)
    od, oh, ow = cols.shape[1:4]
    cols2 = cols.reshape(-1, cols.shape[-1])
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 4, 1)).reshape(cout, -1)
    out = cols2 @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, od, oh, ow, cout).transpose(0, 4, 1, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im3d(g2 @ wmat, x_cl.shape, k, stride, padding)
            gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))
        if weight.requires_grad:
            gw = (cols2.T @ g2).T.reshape(cout, k, k, k, c).transpose(0, 4, 1, 2, 3)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "conv3d")


def conv3d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d` (a.k.a. fractionally strided convolution).

    Args:
        x: (N, Cin, D, H, W).
        weight: (Cin, Cout, k, k, k).

    Returns:
        (N, Cout, oD, oH, oW) with o = (in - 1) * stride - 2 * pad + k.
    """
    _check_conv_args(stride, padding)
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(f"conv3d_transpose expects 5-d input and kernel, got {xd.shape} and {wd.shape}")
    n, cin = xd.shape[:2]
    if wd.shape[0] != cin:
        raise ShapeError(f"conv3d_transpose channel mismatch: input {xd.shape}, kernel {wd.shape}")
    cout, k = wd.shape[1], wd.shape[2]
    od, oh, ow = ((s - 1) * stride - 2 * padding + k for s in xd.shape[2:])
    if min(od, oh, ow) <= 0:
        raise ShapeError(f"conv3d_transpose produces empty output for input {xd.shape}")
    out_cl_shape = (n, od, oh, ow, cout)
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 4, 1)).reshape(cin, -1)
    x2 = np.ascontiguousarray(xd.transpose(0, 2, 3, 4, 1)).reshape(-1, cin)
    out = kernels.col2im3d(x2 @ wmat, out_cl_shape, k, stride, padding)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def bw(g):
        g_cl = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        cols2 = kernels.im2col3d(g_cl, k, stride, padding).reshape(x2.shape[0], -1)
        gx = gw = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                (cols2 @ wmat.T).reshape(n, *xd.shape[2:], cin).transpose(0, 4, 1, 2, 3))
        if weight.requires_grad:
            gw = (x2.T @ cols2).reshape(cin, k, k, k, cout).transpose(0, 4, 1, 2, 3)
        if bias is None:
            return gx, gw
        return gx, gw, g_cl.reshape(-1, cout).sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "conv3d_transpose")
