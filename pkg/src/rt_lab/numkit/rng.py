"""Seeded counter-based random streams.

Backed by numpy's Philox bit generator, whose output for a given key is
specified independently of platform. Every consumer owns an ``Rng``; there is
no module-level generator.
"""
from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, *, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([self.seed, *self.stream])
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def counter(self) -> int:
        """Number of 4x64-bit Philox blocks consumed so far."""
        st = self._gen.bit_generator.state["state"]["counter"]
        return int(st[0]) | (int(st[1]) << 64)

    def derive(self, *index: int) -> "Rng":
        """Independent child stream keyed by ``(seed, *stream, *index)``."""
        return Rng(self.seed, stream=self.stream + tuple(index))

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, p=None) -> int:
        """Index in ``range(n)`` drawn with probabilities ``p`` (uniform if None)."""
        if p is None:
            return int(self._gen.integers(0, n))
        c = np.cumsum(p)
        u = self._gen.random() * c[-1]
        return int(min(np.searchsorted(c, u, side="right"), n - 1))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
