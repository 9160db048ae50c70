"""Splittable deterministic random streams (Philox counter-based bits).

A stream is identified by a SeedSequence; `split` spawns independent child
streams whose draws do not depend on how much the parent has consumed, so
run k of an ensemble is the same whether 1 or 10 runs are requested.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["RngStream"]:
        return [RngStream(s) for s in self._seq.spawn(n)]

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        # drawn at float64 so the sequence is identical in both precisions
        return self.gen.standard_normal(shape).astype(dtype)

    def uniform(self, shape) -> np.ndarray:
        return self.gen.random(shape)

    def bernoulli(self, shape, p: float, dtype=np.float32) -> np.ndarray:
        return (self.gen.random(shape) < p).astype(dtype)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return int(self.gen.integers(lo, hi + 1))
