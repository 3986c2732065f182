"""Counter-based splitmix64 streams.

Every random draw in the package comes from here so that a (seed, stream)
pair pins the exact bits produced. Output ``i`` of a stream seeded with ``s``
is ``mix64(s + (i + 1) * GOLDEN)``; this makes block generation a vectorised
numpy expression and lets replicate streams be derived without touching any
shared state.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


def mix64(z: int) -> int:
    """Scalar splitmix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(root: int, *keys: int) -> int:
    """Mix a root seed with integer keys (e.g. replicate index) into a child seed."""
    s = int(root) & MASK64
    for k in keys:
        s = mix64(s ^ mix64((int(k) + 1) * GOLDEN))
    return s


class SplitMix64:
    """A seeded stream of 64-bit words with float/normal/integer helpers."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def spawn(self, index: int) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, index))

    def next_u64(self, size: int) -> np.ndarray:
        size = int(size)
        with np.errstate(over="ignore"):
            steps = np.arange(self.counter + 1, self.counter + size + 1, dtype=np.uint64)
            z = np.uint64(self.seed) + steps * np.uint64(GOLDEN)
            out = _mix64_array(z)
        self.counter += size
        return out

    def uniform(self, size: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(size) >> np.uint64(11)).astype(np.float64) / _TWO53

    def uniform_range(self, low: float, high: float, size: int) -> np.ndarray:
        return low + (high - low) * self.uniform(size)

    def normal(self, size: int) -> np.ndarray:
        """Standard normals by Box-Muller; one uniform pair per two outputs."""
        size = int(size)
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:size]

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers in [0, high)."""
        idx = np.floor(self.uniform(size) * high).astype(np.int64)
        return np.minimum(idx, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
