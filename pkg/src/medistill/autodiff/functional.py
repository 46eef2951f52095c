"""Differentiable operations.

Each function returns a new :class:`Tensor`.  Backward closures return one
gradient per parent (``None`` where a parent does not need one).  Fused
kernels (``linear``, ``softmax``, ``layer_norm``, ``gelu``,
``cross_entropy``, ``l2_normalize``) carry hand-derived backward rules; all
of them are checked against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from medistill.autodiff.tensor import Tensor, as_tensor, get_dtype, make_result
from medistill.errors import ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _lift(a, b)
    else:
        b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=a.data.dtype)

        def backward_scalar(g):
            return (_unbroadcast(g * scale, a.shape),)

        return make_result(a.data * scale, (a,), backward_scalar, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _lift(a, b)
    else:
        b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp_min(x: Tensor, minimum: float) -> Tensor:
    """max(x, minimum); the gradient is zero where the floor is active."""
    keep = x.data > minimum
    out = np.where(keep, x.data, np.asarray(minimum, dtype=x.data.dtype))
    return make_result(out, (x,), lambda g: (g * keep,), "clamp_min")


def detach(x: Tensor) -> Tensor:
    return x.detach()


# -- reductions and shape ops ----------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make_result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.data.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(x.data[index], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]}): min={ids.min()}, max={ids.max()}")
    rows, width = weight.shape

    def backward(g):
        full = np.zeros((rows, width), dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return make_result(weight.data[ids], (weight,), backward, "embedding")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    n_in, n_out = wd.shape
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, n_in)
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, n_out)

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ wd.T).reshape(*lead, n_in) if x.requires_grad else None
        gw = (x2.T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


# -- normalisation and activations -------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-stabilised softmax; entries where ``mask`` is False get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    """Gaussian error linear unit; ``approximate`` is ``"tanh"`` or ``"erf"`` (exact)."""
    xd = x.data
    if approximate == "tanh":
        x2 = xd * xd
        t = np.tanh(_SQRT_2_OVER_PI * (xd + _GELU_C * x2 * xd))
        out = 0.5 * xd * (1.0 + t)

        def backward(g):
            dt = (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    elif approximate == "erf":
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        out = xd * cdf

        def backward(g):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + xd * pdf),)

    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    return make_result(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.maximum(np.sqrt((xd * xd).sum(axis=axis, keepdims=True)), eps)
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), backward, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return sum(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)


# -- losses --------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_index: int = -100, label_smoothing: float = 0.0) -> Tensor:
    """Mean token cross-entropy over positions whose target is not ``ignore_index``.

    With every target ignored the loss is defined as 0 with a zero gradient.
    """
    targets = np.asarray(targets).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    n, vocab = z.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise IndexError(f"cross_entropy target {targets[bad][0]} outside [0, {vocab})")
    count = int(valid.sum())
    shape = logits.shape
    if count == 0:
        return make_result(np.zeros((), dtype=z.dtype), (logits,),
                           lambda g: (np.zeros(shape, dtype=z.dtype),), "cross_entropy")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    safe = np.where(valid, targets, 0)
    nll = -logp[np.arange(n), safe]
    per_row = (1.0 - label_smoothing) * nll
    if label_smoothing:
        per_row = per_row - label_smoothing * logp.mean(axis=1)
    loss = (per_row * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        if label_smoothing:
            grad -= label_smoothing / vocab
        grad[np.arange(n), safe] -= 1.0 - label_smoothing
        grad *= (valid / count)[:, None] * g
        return (grad.reshape(shape),)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(logits))``; targets are constants."""
    target_probs = np.asarray(target_probs, dtype=logits.data.dtype)
    rows = logits.shape[0]
    return mul(sum(mul(log_softmax(logits, axis=-1), Tensor(target_probs, dtype=logits.data.dtype))), -1.0 / rows)


def new_zeros(shape, dtype=None) -> np.ndarray:
    return np.zeros(shape, dtype=dtype or get_dtype())
