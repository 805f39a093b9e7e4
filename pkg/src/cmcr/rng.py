"""Deterministic random numbers that reproduce across platforms.

Uniform doubles come from numpy's counter-based Philox generator keyed by
(seed, stream), so independent streams never overlap and the sequence is
identical on every OS and architecture.  Normals are produced by an
explicit Box-Muller transform on those uniforms instead of numpy's
ziggurat tables, which keeps the normal draws pinned to the documented
uniform sequence.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


class PortableRng:
    """Seeded generator with named sub-streams.

    Parameters
    ----------
    seed : 64-bit integer; negative values are reduced mod 2**64.
    stream : sub-stream id, used as the second Philox key word.  Streams
        with the same seed but different ids are statistically independent.
    """

    def __init__(self, seed: int, stream: int = 0):
        key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.seed = seed
        self.stream = stream

    def uniform(self, size=None) -> np.ndarray:
        """Doubles in [0, 1)."""
        return self._gen.random(size)

    def standard_normal(self, size=None) -> np.ndarray:
        """N(0, 1) draws via Box-Muller on consecutive uniform pairs."""
        shape = () if size is None else size
        n = int(np.prod(shape)) if shape != () else 1
        half = (n + 1) // 2
        # 1 - U keeps the log argument in (0, 1], never 0
        u1 = 1.0 - self._gen.random(half)
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def normal(self, sigma: float, size=None) -> np.ndarray:
        """Zero-mean normals with standard deviation sigma."""
        return self.standard_normal(size) * sigma

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)
