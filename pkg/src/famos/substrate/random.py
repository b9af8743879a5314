"""Counter-based random state.

Every draw derives a fresh PCG64 generator from (seed, counter) and
advances the counter by one, so the pair fully determines the entire
stream and serializes as two integers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngState"]

_MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        g = np.random.default_rng(
            (np.uint64(self.seed & _MASK64), np.uint64(self.counter & _MASK64))
        )
        self.counter += 1
        return g

    def normal(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, std, size=shape).astype(np.float32)

    def uniform(self, shape: tuple[int, ...], low: float = -1.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape).astype(np.float32)

    def integer(self, low: int, high: int) -> int:
        """One integer uniform on [low, high)."""
        return int(self._generator().integers(low, high))

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)
