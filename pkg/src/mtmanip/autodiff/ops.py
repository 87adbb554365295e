"""Differentiable operations: exactly the set the multi-task network needs."""
from __future__ import annotations

import contextlib
from typing import Iterator, Optional, Sequence

import numpy as np

from ..errors import BatchSizeError, ContractError, DimensionError, GeometryError
from . import kernels
from .tensor import Tensor, make_output


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return make_output(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return make_output(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    return make_output(ad * bd, "mul", (a, b), bw)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (2.0 * xd * g,)
    return make_output(xd * xd, "square", (x,), bw)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return make_output(np.asarray(x.data.sum(axis=axis)), "sum", (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape

    def bw(g):
        return (np.full(shape, float(g) / n),)
    return make_output(np.asarray(x.data.mean()), "mean", (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)
    return make_output(x.data.reshape(shape), "reshape", (x,), bw)


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    return reshape(x, (x.shape[0], -1))


# -- nonlinearities ---------------------------------------------------------

_relu_masks: Optional[list] = None


@contextlib.contextmanager
def record_relu_masks() -> Iterator[list]:
    """Collect every ReLU activation mask computed inside the block.

    Gradient checking uses this to spot finite-difference probes that straddle a kink.
    """
    global _relu_masks
    prev = _relu_masks
    _relu_masks = []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)

    def bw(g):
        return (g * mask,)
    return make_output(np.where(mask, x.data, 0.0), "relu", (x,), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)
    return make_output(s, "sigmoid", (x,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        return (g * mask,)
    return make_output(x.data * mask, "dropout", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise DimensionError(f"concat: rank {len(t.shape)} != {len(ref)}")
        for k, (a, b) in enumerate(zip(ref, t.shape)):
            if k != ax and a != b:
                raise DimensionError(f"concat: axis {k} has size {b}, expected {a}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))
    return make_output(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bw)


# -- layers -------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int, axis: str = "height") -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise GeometryError(f"{axis}: padded size {size + 2 * pad} smaller than kernel {k}")
    if span % stride:
        raise GeometryError(f"{axis}: (size + 2*pad - kernel) = {span} not divisible by stride {stride}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via im2col and one matrix product."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (N,C,H,W), got rank {x.ndim}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D (K,C,kh,kw), got rank {weight.ndim}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: channel axis (1) of input is {c}, weight expects {wc}")
    if bias.shape != (k,):
        raise DimensionError(f"conv2d: bias axis 0 is {bias.shape}, expected ({k},)")
    ho = conv_output_size(h, kh, stride, pad, "height")
    wo = conv_output_size(w, kw, stride, pad, "width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(k, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    padded_shape = xp.shape
    col2im = kernels.col2im

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, -1)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gb = gmat.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(wmat.T @ gmat)
            gxp = col2im(gcols, padded_shape, kh, kw, stride)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb
    return make_output(out, "conv2d", (x, weight, bias), bw)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"fully_connected input must be 2-D (N,D), got rank {x.ndim}")
    m, d = weight.shape
    if x.shape[1] != d:
        raise DimensionError(f"fully_connected: input axis 1 is {x.shape[1]}, weight expects {d}")
    if bias.shape != (m,):
        raise DimensionError(f"fully_connected: bias axis 0 is {bias.shape}, expected ({m},)")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)
    return make_output(xd @ wd.T + bias.data, "fully_connected", (x, weight, bias), bw)


class BatchNormStats:
    """Running per-channel mean/variance used in eval mode."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * batch_mean
        self.var = m * self.var + (1.0 - m) * batch_var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, training: bool) -> Tensor:
    """Per-channel normalisation over the batch and all spatial axes."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: channel axis (1) is {c}, gamma/beta are {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    eps = stats.eps
    if training:
        if x.shape[0] < 2:
            raise BatchSizeError(f"batch_norm in train mode needs N >= 2, got N={x.shape[0]}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        stats.update(mu, var)
    else:
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    count = xd.size // c
    gd = gamma.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta
    return make_output(out, "batch_norm", (x, gamma, beta), bw)


# -- loss building blocks ---------------------------------------------------------

def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[i, index[i]]`` for each row; other entries get zero gradient."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got rank {x.ndim}")
    index = np.asarray(index)
    n, m = x.shape
    if index.shape != (n,):
        raise DimensionError(f"gather_rows: index axis 0 is {index.shape}, expected ({n},)")
    if index.size and (index.min() < 0 or index.max() >= m):
        raise IndexError(f"gather_rows: index out of range [0, {m})")
    rows = np.arange(n)
    index = index.astype(np.intp)

    def bw(g):
        gx = np.zeros((n, m))
        gx[rows, index] = g
        return (gx,)
    return make_output(x.data[rows, index], "gather_rows", (x,), bw)


def bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Elementwise -y*log(sig(z)) - (1-y)*log(1-sig(z)), in a form that never overflows."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: labels {y.shape} vs logits {z.shape}")
    zd = z.data
    loss = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    s = _sigmoid(zd)

    def bw(g):
        return (g * (s - y),)
    return make_output(loss, "bce_with_logits", (z,), bw)
