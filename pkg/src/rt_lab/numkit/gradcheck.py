"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def grad_check(f: Callable[..., Tensor], *xs: Tensor, h: float = 1e-5,
               max_coords: int | None = None, rng=None) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    ``f`` maps the tensors ``xs`` to a scalar tensor. Central differences with
    step ``h`` are taken on each coordinate (or on ``max_coords`` coordinates
    per tensor chosen with ``rng``).
    """
    for x in xs:
        x.requires_grad = True
    with Tape() as tape:
        out = f(*xs)
    grads = tape.gradient(out, list(xs))
    worst = 0.0
    for x, g in zip(xs, grads):
        g_ad = np.zeros(x.shape) if g is None else g
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.permutation(flat.size)[:max_coords] if rng is not None else idx[:max_coords]
        g_ad_flat = g_ad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs).item()
            flat[i] = orig - h
            fm = f(*xs).item()
            flat[i] = orig
            g_fd = (fp - fm) / (2 * h)
            ga = g_ad_flat[i]
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    return worst
