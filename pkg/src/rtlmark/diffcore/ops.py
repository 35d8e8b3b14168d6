"""Differentiable operations on :class:`Tensor`.

Layout is NHWC throughout. Every op computes its forward result with numpy
and registers a closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

import builtins
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DegenerateInputError, DimensionError, Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# when a list, piecewise-linear ops append the sign pattern of their input
_kink_log: Optional[list] = None


@contextmanager
def watch_kinks():
    """Collect the input sign patterns of every relu/abs evaluated inside the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return record("scale", (x,), x.data * c, lambda g: (g * c,))


def abs(x: Tensor) -> Tensor:
    xd = x.data
    if _kink_log is not None:
        _kink_log.append(np.sign(xd))
    return record("abs", (x,), np.abs(xd), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    two = xd.dtype.type(2)
    return record("square", (x,), xd * xd, lambda g: (g * two * xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (x,), np.asarray(out), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record("getitem", (x,), np.ascontiguousarray(x.data[index]), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bw)


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return record("linear", (x, weight), out, lambda g: (g @ wd.T, xd.T @ g))
    if bias.shape != (wd.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    return record("linear", (x, weight, bias), out + bias.data,
                  lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), y, bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), bw)


def global_avgpool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avgpool expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def bw(g):
        return (np.broadcast_to((g * inv)[:, None, None, :], (n, h, w, c)).copy(),)

    return record("global_avgpool", (x,), x.data.mean(axis=(1, 2)), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero vector")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return record("l2_normalize", (x,), y, bw)


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: {u.shape} vs {v.shape}")
    return sum(mul(l2_normalize(u, axis), l2_normalize(v, axis)), axis=axis)


def mse_frobenius(a: Tensor, b) -> Tensor:
    """Sum of squared differences (squared Frobenius norm of ``a - b``)."""
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise DimensionError(f"mse_frobenius: {a.shape} vs {b.shape}")
    d = a.data - b.data
    two = d.dtype.type(2)
    return record("mse_frobenius", (a, b), np.asarray((d * d).sum(), dtype=a.dtype),
                  lambda g: (two * g * d, -two * g * d))


# ---------------------------------------------------------------- convolution

def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, shape=(n, ho, wo, kh, kw, c),
                      strides=(sn, stride * sh, stride * sw, sh, sw, sc), writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c)


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int, padding: int):
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    out = (cols @ k.reshape(-1, cout)).reshape(n, ho, wo, cout)
    return out, cols


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, padding: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of the conv map wrt its input (a scatter-add of kernel taps)."""
    n, ho, wo, cout = g.shape
    kh, kw, cin, _ = k.shape
    h, w = in_hw
    dcols = (g.reshape(-1, cout) @ k.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    hp, wp = h + 2 * padding, w + 2 * padding
    # rows/cols past the last full stride window never receive taps
    hp_full = builtins.max(hp, (ho - 1) * stride + kh)
    wp_full = builtins.max(wp, (wo - 1) * stride + kw)
    dxp = np.zeros((n, hp_full, wp_full, cin), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return np.ascontiguousarray(dxp[:, padding:padding + h, padding:padding + w, :])


def _conv_kernel_grad(cols: np.ndarray, g: np.ndarray, kshape: tuple) -> np.ndarray:
    cout = kshape[3]
    return (cols.T @ g.reshape(-1, cout)).reshape(kshape)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NHWC input, kernel laid out (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D operands, got {x.shape} and {kernel.shape}")
    xd, kd = x.data, kernel.data
    out, cols = _conv_fwd(xd, kd, stride, padding)
    in_hw = xd.shape[1:3]

    def bw(g):
        gx = _conv_input_grad(g, kd, stride, padding, in_hw) if x.requires_grad else None
        gk = _conv_kernel_grad(cols, g, kd.shape) if kernel.requires_grad else None
        return gx, gk

    return record("conv2d", (x, kernel), out, bw)


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; kernel laid out (kh, kw, Cout, Cin).

    Equals the input-gradient of :func:`conv2d` with the same kernel, so
    the output extent is ``(H - 1) * stride - 2 * padding + kh``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"deconv2d: expected 4-D operands, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, cout, kcin = kernel.shape
    if kcin != cin:
        raise DimensionError(f"deconv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise DimensionError("deconv2d: stride must be >= 1")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"deconv2d: output extent ({ho}, {wo}) is not positive")
    xd, kd = x.data, kernel.data
    out = _conv_input_grad(xd, kd, stride, padding, (ho, wo))

    def bw(g):
        gconv, cols = _conv_fwd(g, kd, stride, padding)
        gx = gconv if x.requires_grad else None
        gk = _conv_kernel_grad(cols, xd, kd.shape) if kernel.requires_grad else None
        return gx, gk

    return record("deconv2d", (x, kernel), out, bw)


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer (buffers, not parameters)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              train: bool = True, update_stats: bool = True) -> Tensor:
    """Normalize over every axis but the last (channel) axis."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    dt = xd.dtype.type
    axes = tuple(range(xd.ndim - 1))
    if train:
        m = xd.size // c
        if m == 0:
            raise DimensionError("batchnorm: empty batch in train mode")
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        if update_stats:
            mom = state.momentum
            state.mean = (mom * state.mean + (1 - mom) * mu).astype(state.mean.dtype)
            state.var = (mom * state.var + (1 - mom) * var).astype(state.var.dtype)
    else:
        m = None
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
        xc = xd - mu
    inv_std = (1.0 / np.sqrt(var + dt(state.eps))).astype(xd.dtype)
    xhat = xc * inv_std
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if m is None:
            dx = dxhat * inv_std
        else:
            dx = (inv_std / dt(m)) * (dt(m) * dxhat - dxhat.sum(axis=axes)
                                      - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, dgamma, dbeta

    return record("batchnorm", (x, gamma, beta), out, bw)
