"""Counter-based random streams.

Every random number is a pure function of ``(seed, iteration, tag, walker,
position)``; no generator state is carried between calls.  Simulating walkers
in any order, in chunks, or in parallel therefore reproduces the same paths.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import kernels

# stream tags (third Philox counter word)
WIENER = 0
INITIAL = 1
GRID = 2


@dataclass(frozen=True)
class CounterRng:
    seed: int
    iteration: int = 0

    def at_iteration(self, iteration):
        return replace(self, iteration=int(iteration))

    def _key(self):
        s = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        return s & 0xFFFFFFFF, s >> 32

    def uniforms(self, tag, rows, count):
        """Uniform(0, 1) draws of shape ``(len(rows), count)``."""
        rows = np.asarray(rows, dtype=np.int64)
        if count == 0:
            return np.empty((len(rows), 0))
        k0, k1 = self._key()
        pairs = kernels.uniform_pairs(rows, (count + 1) // 2, self.iteration, tag, k0, k1)
        return pairs.reshape(len(rows), -1)[:, :count]

    def normals(self, tag, rows, count):
        """Standard normal draws of shape ``(len(rows), count)`` via Box-Muller."""
        rows = np.asarray(rows, dtype=np.int64)
        if count == 0:
            return np.empty((len(rows), 0))
        k0, k1 = self._key()
        pairs = kernels.uniform_pairs(rows, (count + 1) // 2, self.iteration, tag, k0, k1)
        r = np.sqrt(-2.0 * np.log(pairs[..., 0]))
        ang = 2.0 * np.pi * pairs[..., 1]
        z = np.empty(pairs.shape)
        z[..., 0] = r * np.cos(ang)
        z[..., 1] = r * np.sin(ang)
        return z.reshape(len(rows), -1)[:, :count]

    def uniform(self, low=0.0, high=1.0, size=1):
        """Generator-style uniform draws from the grid stream of this iteration."""
        u = self.uniforms(GRID, [0], int(size))[0]
        return low + (high - low) * u


def as_counter_rng(rng):
    if isinstance(rng, CounterRng):
        return rng
    if isinstance(rng, (int, np.integer)):
        return CounterRng(int(rng))
    raise TypeError(f"expected CounterRng or integer seed, got {type(rng).__name__}")
