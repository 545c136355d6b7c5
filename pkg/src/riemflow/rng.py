"""Counter-based noise streams.

Every Gaussian increment is a pure function of (master seed, path index,
step counter, coordinate).  That makes path simulation embarrassingly
parallel and bit-reproducible under any worker count: no generator state
is ever shared or advanced, a worker just evaluates the counters it owns.

The mixing function is the SplitMix64 finalizer applied in a
hash-combine chain; uniforms are mapped to normals through the inverse
normal CDF (scipy's ndtri), which is deterministic across platforms for
float64.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _finalize(z):
    """SplitMix64 finalizer on uint64 arrays (vectorized, overflow wraps)."""
    z = (z + _GOLDEN).astype(np.uint64)
    z ^= z >> np.uint64(30)
    z = (z * _MIX1).astype(np.uint64)
    z ^= z >> np.uint64(27)
    z = (z * _MIX2).astype(np.uint64)
    z ^= z >> np.uint64(31)
    return z


def counter_uniform(seed, path_index, step, dim):
    """Uniform(0,1) draws keyed by (seed, path, step, dim).

    `path_index`, `step`, `dim` may be integers or integer arrays and
    broadcast against each other.
    """
    with np.errstate(over="ignore"):
        h = _finalize(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        h = _finalize(h ^ np.asarray(path_index, dtype=np.uint64))
        h = _finalize(h ^ np.asarray(step, dtype=np.uint64))
        h = _finalize(h ^ np.asarray(dim, dtype=np.uint64))
    # 53-bit mantissa, strictly inside (0,1) so ndtri is finite
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def counter_normals(seed, path_index, step, d):
    """Standard normal block of shape (len(path_index), d).

    path_index: int array (n,); step: scalar int; d: dimension.
    """
    idx = np.asarray(path_index, dtype=np.uint64)
    u = counter_uniform(seed, idx[:, None], step, np.arange(d, dtype=np.uint64)[None, :])
    return ndtri(u)


@dataclass
class RngStream:
    """One path's noise stream: (seed, path index) fix it entirely.

    counter tracks the step so that repeated normals() calls walk the
    path's increments in order; rewinding is just resetting counter.
    """

    master_seed: int
    path_index: int
    counter: int = 0

    def normals(self, d: int) -> np.ndarray:
        out = counter_normals(self.master_seed, np.array([self.path_index]), self.counter, d)[0]
        self.counter += 1
        return out

    def peek(self, step: int, d: int) -> np.ndarray:
        """Increment at a given step without advancing the counter."""
        return counter_normals(self.master_seed, np.array([self.path_index]), step, d)[0]
