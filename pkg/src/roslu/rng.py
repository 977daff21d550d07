"""Seeded, splittable random streams.

Streams are Philox-4x64 (counter based) keyed through a ``SeedSequence``
built from ``(seed, *path)``.  A substream therefore depends only on its
path, never on how much of any sibling stream has been consumed.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


class Rng:
    algorithm = ALGORITHM

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *index: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(index))

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def choice(self, seq):
        """Uniform pick from a non-empty sequence."""
        return seq[int(self._gen.integers(len(seq)))]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
