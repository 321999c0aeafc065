"""Differentiable primitives.

Binary elementwise ops broadcast like numpy; the backward pass sums the
gradient back to each operand's shape. Every op reports its cost to any
active ``FlopCounter`` (see ``microcount.tensor.flops`` for the matching
analytic formulas).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .core import DTYPE, Tensor, as_tensor, count_elementwise, count_macs, make_result, record_pattern

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    count_elementwise(out.size)
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    count_elementwise(out.size)
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    count_elementwise(out.size)

    def grad(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), grad)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    count_elementwise(out.size)

    def grad(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), grad)


def neg(a: Tensor) -> Tensor:
    count_elementwise(a.size)
    return make_result(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    count_elementwise(a.size)
    record_pattern(a.data > 0, lambda: np.abs(a.data).min(initial=np.inf))
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    count_elementwise(a.size)
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(x: Tensor) -> Tensor:
    count_elementwise(x.size)
    mask = x.data > 0
    record_pattern(mask, lambda: np.abs(x.data).min(initial=np.inf))
    return make_result(np.where(mask, x.data, 0.0).astype(DTYPE), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    count_elementwise(x.size)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(DTYPE)

    def grad(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(DTYPE),)

    return make_result(out, (x,), grad)


# reductions and shape ops ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count_elementwise(x.size)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return make_result(out, (x,), grad)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    count_elementwise(x.size)
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).astype(DTYPE),)

    return make_result(out, (x,), grad)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic(index)

    def grad(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, dtype=DTYPE), (x,), grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(out, tuple(tensors), grad)


def expand(x: Tensor, shape: tuple) -> Tensor:
    """Broadcast ``x`` to ``shape`` (e.g. a learned token to a batch)."""
    out = np.broadcast_to(x.data, shape).copy()
    return make_result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    count_macs(out.size * a.shape[-1])

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    k, n = weight.shape
    if x.shape[-1] != k:
        raise ValueError(f"linear expects last dim {k}, got {x.shape}")
    flat = x.data.reshape(-1, k)
    out = flat @ weight.data
    count_macs(out.size * k)
    if bias is not None:
        out += bias.data
        count_elementwise(out.size)
    out = out.reshape(x.shape[:-1] + (n,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, grad)


# normalisation and attention helpers ----------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    count_elementwise(x.size)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), grad)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    count_elementwise(x.size)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.data.var(axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = ((x.data - mu) * rstd).astype(DTYPE)
    out = xhat * gain.data + shift.data
    lead = tuple(range(x.ndim - 1))

    def grad(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, shift), grad)


def batchnorm2d(x: Tensor, gain: Tensor, shift: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    In training mode batch statistics are used and the running estimates are
    updated in place; otherwise the running estimates are used.
    """
    count_elementwise(x.size)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        n = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean, running_var
    rstd = (1.0 / np.sqrt(var + eps)).astype(DTYPE).reshape(shape)
    xhat = ((x.data - np.asarray(mu, dtype=DTYPE).reshape(shape)) * rstd).astype(DTYPE)
    out = xhat * gain.data.reshape(shape) + shift.data.reshape(shape)

    def grad(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data.reshape(shape)
            if training:
                gx = rstd * (gh - gh.mean(axis=axes, keepdims=True)
                             - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gh * rstd
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gain, shift), grad)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    count_elementwise(x.size)
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps).astype(DTYPE)
    out = x.data / norm

    def grad(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), grad)


# convolution and pooling -----------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with (out, in, k, k) kernels via patch gather + matmul."""
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d: input has {C} channels, kernels expect {Ci}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    count_macs(out.size * cols.shape[1])
    if bias is not None:
        out += bias.data
        count_elementwise(out.size)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(np.ascontiguousarray(out), parents, grad)


def _pool_gap(win: np.ndarray) -> float:
    if win.shape[-1] < 2 or win.size == 0:
        return np.inf
    top2 = np.partition(win, -2, axis=-1)[..., -2:]
    gap = top2[..., 1] - top2[..., 0]
    # windows of rectified zeros stay tied under small perturbations
    gap = np.where((top2[..., 1] == 0) & (top2[..., 0] == 0), np.inf, gap)
    return float(gap.min())


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, kernel, stride, padding), _conv_out(W, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    win = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    record_pattern(arg, lambda: _pool_gap(win))
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    count_elementwise(out.size * kernel * kernel)

    def grad(g):
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(Ho)[None, None, :, None] * stride + di
        cols = np.arange(Wo)[None, None, None, :] * stride + dj
        Hp, Wp = xp.shape[2], xp.shape[3]
        base = (np.arange(B)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * Hp * Wp
        flat = (base + rows * Wp + cols).ravel()
        gxp = np.bincount(flat, weights=g.ravel(), minlength=B * C * Hp * Wp).astype(DTYPE)
        gxp = gxp.reshape(B, C, Hp, Wp)
        return (gxp[:, :, padding:padding + H, padding:padding + W],)

    return make_result(np.ascontiguousarray(out, dtype=DTYPE), (x,), grad)


# losses ----------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: prediction shape {pred.shape} != target shape {target.shape}")
    return mean(absolute(sub(pred, target)))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    return mean(square(sub(pred, target)))


# operator sugar ----------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.sum = sum_
Tensor.mean = mean
