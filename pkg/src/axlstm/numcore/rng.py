"""Seeded random streams keyed by purpose.

Each stream ("mask", "init", "data", ...) gets its own generator derived from
(seed, label), so drawing extra init values never shifts the mask sequence.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(stream.encode()),))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    def child(self, stream: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{stream}")

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal samples truncated at +-bound standard deviations (resampled)."""
        out = self.generator.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.generator.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self.generator.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self.generator.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
