"""Differentiable operations on :class:`Tensor`.

Every op returns a new tensor; gradients are only recorded while grad mode
is enabled and at least one input requires grad.
"""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


class DegenerateRowError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------
# Each op hands make_node a ``fwd`` that recomputes its output from the
# parents' arrays; the op itself computes its output through the same function.

def _scalar(x) -> bool:
    return isinstance(x, (float, int)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _scalar(b) and isinstance(a, Tensor):
        fwd = lambda x: x + b  # noqa: E731
        return make_node(fwd(a.data), (a,), lambda g: (g,), "add", fwd)
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add", np.add)


def sub(a, b) -> Tensor:
    if _scalar(a) and isinstance(b, Tensor):
        fwd = lambda y: a - y  # noqa: E731
        return make_node(fwd(b.data), (b,), lambda g: (-g,), "sub", fwd)
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub", np.subtract)


def mul(a, b) -> Tensor:
    if _scalar(b) and isinstance(a, Tensor):
        fwd = lambda x: x * b  # noqa: E731
        return make_node(fwd(a.data), (a,), lambda g: (g * b,), "mul", fwd)
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul", np.multiply)


def scale(a, c: float) -> Tensor:
    return mul(a, float(c))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return make_node(out, (a, b), backward, "div", np.divide)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    fwd = lambda x: x ** p  # noqa: E731
    return make_node(fwd(a.data), (a,), lambda g: (g * p * a.data ** (p - 1),), "pow", fwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp", np.exp)


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log", np.log)


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs", np.abs)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh", np.tanh)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid", _sigmoid)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return make_node(_relu(a.data), (a,), lambda g: (g * (a.data > 0),), "relu", _relu)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return make_node(_gelu(x), (a,), backward, "gelu", _gelu)


def _maximum(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(x >= y, x, y)


def _minimum(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(x <= y, x, y)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return make_node(
        _maximum(a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)), "maximum", _maximum)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return make_node(
        _minimum(a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)), "minimum", _minimum)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    fwd = lambda x: np.clip(x, lo, hi)  # noqa: E731
    return make_node(fwd(a.data), (a,), lambda g: (g * inside,), "clamp", fwd)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# -- shape manipulation -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(out, (a, b), backward, "matmul", np.matmul)


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = x @ w
    out += b
    return out


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` as a single node; ``x`` may carry leading batch axes."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape} + {b.shape}")

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        flat_x = x.data.reshape(-1, w.shape[0])
        flat_g = g.reshape(-1, w.shape[1])
        gw = flat_x.T @ flat_g if w.requires_grad else None
        gb = flat_g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb
    return make_node(_linear(x.data, w.data, b.data), (x, w, b), backward, "linear", _linear)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    fwd = lambda x: x.reshape(shape)  # noqa: E731
    return make_node(fwd(a.data), (a,), lambda g: (g.reshape(a.shape),), "reshape", fwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    fwd = lambda x: np.transpose(x, axes)  # noqa: E731
    return make_node(fwd(a.data), (a,), lambda g: (np.transpose(g, inv),), "transpose", fwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    fwd = lambda x: np.swapaxes(x, ax1, ax2)  # noqa: E731
    return make_node(fwd(a.data), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes", fwd)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)
    fwd = lambda x: np.array(x[idx], copy=True)  # noqa: E731

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return make_node(fwd(a.data), (a,), backward, "index", fwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    fwd = lambda *xs: np.concatenate(xs, axis=axis)  # noqa: E731
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        parts = []
        for k in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            parts.append(g[tuple(sl)])
        return tuple(parts)
    return make_node(fwd(*[t.data for t in ts]), ts, backward, "concat", fwd)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    a = as_tensor(a)
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} of shape {a.shape}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(index(a, tuple(sl)))
        start += n
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    fwd = lambda *xs: np.stack(xs, axis=axis)  # noqa: E731
    return make_node(fwd(*[t.data for t in ts]), ts,
                     lambda g: tuple(np.take(g, k, axis=axis) for k in range(len(ts))), "stack", fwd)


# -- reductions ---------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    fwd = lambda x: x.sum(axis=axis, keepdims=keepdims)  # noqa: E731

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_node(fwd(a.data), (a,), backward, "sum", fwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisation and probability ---------------------------------------------

def _layernorm_parts(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xhat, inv = _layernorm_parts(x.data, eps)

    def fwd(xd, gd, bd):
        return _layernorm_parts(xd, eps)[0] * gd + bd

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))
    return make_node(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layernorm", fwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def fwd(xd):
        e = np.exp(xd - xd.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    p = fwd(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)
    return make_node(p, (x,), backward, "softmax", fwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def fwd(xd):
        z = xd - xd.max(axis=axis, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = fwd(x.data)
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax", fwd)


def masked_softmax(logits, mask=None, col_split: int | None = None) -> Tensor:
    """Softmax over the last axis with ``mask`` (True = blocked) forced to 0.

    ``mask`` broadcasts against ``logits``; a 1-D mask is a row vector. With
    ``col_split`` the row normaliser is accumulated as two partial sums
    (columns before and after the split) so rows whose first block is fully
    masked normalise bit-identically to a softmax over the second block alone.
    """
    x = as_tensor(logits)
    if mask is None:
        m = np.zeros(x.shape[-1:], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
    m = np.broadcast_to(m, x.shape)
    if m.all(axis=-1).any():
        raise DegenerateRowError("masked_softmax: a row has every entry masked")

    def fwd(xd):
        rowmax = np.where(m, -np.inf, xd).max(axis=-1, keepdims=True)
        e = np.where(m, 0.0, np.exp(np.where(m, 0.0, xd - rowmax)))
        if col_split is None:
            denom = e.sum(axis=-1, keepdims=True)
        else:
            head = np.ascontiguousarray(e[..., :col_split])
            tail = np.ascontiguousarray(e[..., col_split:])
            denom = head.sum(axis=-1, keepdims=True) + tail.sum(axis=-1, keepdims=True)
        return e / denom
    p = fwd(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return make_node(p, (x,), backward, "masked_softmax", fwd)


# -- losses -------------------------------------------------------------------

def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise Smooth-L1: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    pred, target = as_tensor(pred), as_tensor(target)

    def fwd(p, t):
        d = p - t
        ad = np.abs(d)
        return np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    d = pred.data - target.data
    quad = np.abs(d) < beta

    def backward(g):
        gd = g * np.where(quad, d / beta, np.sign(d))
        return _unbroadcast(gd, pred.shape), _unbroadcast(-gd, target.shape)
    return make_node(fwd(pred.data, target.data), (pred, target), backward, "smooth_l1", fwd)


def l1(pred, target) -> Tensor:
    return abs(sub(pred, target))


def focal_loss(logits, labels, alpha: float = 0.25, gamma: float = 2.0, background: int | None = None) -> Tensor:
    """Softmax focal loss per row: -a_t (1 - p_t)^gamma log p_t.

    ``labels`` are integer class indices; rows labelled ``background`` get
    weight ``1 - alpha``, all others ``alpha``.
    """
    x = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    n_cls = x.shape[-1]
    if background is None:
        background = n_cls - 1
    onehot = np.eye(n_cls)[labels]
    logp = log_softmax(x)
    logpt = sum(mul(logp, onehot), axis=-1)
    pt = exp(logpt)
    weight = np.where(labels == background, 1.0 - alpha, alpha)
    modulator = power(sub(1.0, pt), gamma)
    return mul(mul(modulator, logpt), -weight)


def cross_entropy(logits, labels) -> Tensor:
    x = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    onehot = np.eye(x.shape[-1])[labels]
    return mul(sum(mul(log_softmax(x), onehot), axis=-1), -1.0)


# -- lookup and sampling ------------------------------------------------------

def embedding(table, idx) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=int)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)
    fwd = lambda t: t[idx]  # noqa: E731
    return make_node(fwd(table.data), (table,), backward, "embedding", fwd)


def gaussian_sample(mu, log_var, eps: np.ndarray) -> Tensor:
    """Pathwise draw ``mu + exp(log_var / 2) * eps`` with ``eps`` held constant."""
    return add(mu, mul(exp(scale(log_var, 0.5)), np.asarray(eps, dtype=np.float64)))


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return as_tensor(x)
    keep = (rng.random(as_tensor(x).shape) >= p) / (1.0 - p)
    return mul(x, keep)
