"""Differentiable ops over :class:`Tensor`.

Broadcasting is supported in the forms the models use (matrix @ matrix,
batched @ matrix, row-bias addition); gradients are summed back to the input
shape.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, make


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make("add", a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make("sub", a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make("mul", ad * bd, (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make("div", ad / bd, (a, b),
                lambda g: (_unbroadcast(g / bd, ad.shape),
                           _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a: Tensor) -> Tensor:
    return make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): fold leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return make("matmul", (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), (a, b), back2)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make("matmul", ad @ bd, (a, b), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return make("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make("gelu", out, (a,), back)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make("getitem", a.data[idx], (a,), back)


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return make("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make("stack", np.stack([x.data for x in xs], axis=axis), tuple(xs), back)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make("embedding", table.data[idx], (table,), back)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (True = keep) zeroes excluded entries."""
    x = as_tensor(x)
    out = softmax_np(x.data, axis=axis, mask=mask)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make("softmax", out, (x,), back)


def softmax_np(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        xm = np.where(mask, x, -np.inf)
        m = xm.max(axis=axis, keepdims=True)
        e = np.exp(xm - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make("log_softmax", out, (x,),
                lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[i, target_i]`` over rows.

    ``logits`` may have any leading shape; ``targets`` matches it without the
    class axis. ``weights`` (same shape as targets) turns the mean into a
    weighted mean, which is how padded positions are excluded.
    """
    logits = as_tensor(logits)
    v = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of vocabulary [0, {v})")
    flat = logits.data.reshape(-1, v)
    tf = t.reshape(-1)
    w = np.ones(tf.shape) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy over zero weight")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(tf)), tf]
    loss = float((w * nll).sum() / total)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(tf)), tf] -= 1.0
        p *= (w / total)[:, None]
        return ((g * p).reshape(logits.shape),)

    return make("cross_entropy", np.array(loss), (logits,), back)


def bce_with_logits(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean binary cross-entropy on raw logits."""
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones(x.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    # log(1 + e^x) - y x, stable form
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = float((w * per).sum() / total)

    def back(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * w * (p - y) / total,)

    return make("bce_with_logits", np.array(loss), (logits,), back)


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over every element."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    m, lv = mu.data, logvar.data
    ev = np.exp(lv)
    val = 0.5 * float((ev + m * m - 1.0 - lv).sum())
    return make("kl_diag_gaussian", np.array(val), (mu, logvar),
                lambda g: (g * m, g * 0.5 * (ev - 1.0)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return make("layer_norm", out, (x, gain, bias), back)


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def where_const(cond: np.ndarray, x: Tensor, value: float) -> Tensor:
    """``x`` where ``cond`` else a constant."""
    return make("where", np.where(cond, x.data, value), (x,), lambda g: (g * cond,))
