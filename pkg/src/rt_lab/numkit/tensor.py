"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what inference paths rely on.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A tensor op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators delegate to the functional ops in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records ops so gradients can be replayed in reverse.

    Usage::

        with Tape() as tape:
            loss = model_loss(params)
        grads = tape.gradient(loss, params)

    A tape can be replayed once; call :meth:`reset` before reusing it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._replayed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()
        self._replayed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._replayed:
            raise TapeError("tape already replayed; reset() before recording again")
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Replay in reverse from a scalar ``loss``; returns grads keyed by id."""
        if self._replayed:
            raise TapeError("tape already replayed")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._replayed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray | None]:
        """Gradients of ``loss`` for each of ``params``; None where no path exists."""
        grads = self.backward(loss)
        out = []
        for p in params:
            g = grads.get(id(p))
            p.grad = g
            out.append(g)
        return out


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class no_tape:
    """Suspend recording (e.g. for target-network evaluation inside a step)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Wrap an op result, check finiteness, and record it if needed."""
    # NaN/Inf anywhere makes the sum non-finite; cheaper than an elementwise mask
    if not math.isfinite(float(data.sum())):
        raise NumericError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
        else:
            out.requires_grad = False
    return out
