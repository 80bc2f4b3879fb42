"""Portable seeded random numbers (splitmix64).

Every stochastic step in the package (scene synthesis, point sampling, weight
init, augmentation) draws from this generator so fixtures are reproducible
bit-for-bit on any platform. Draw ``i`` of a stream seeded with ``s`` is
``mix(s + (i + 1) * GAMMA)`` modulo 2**64, which makes bulk draws vectorisable.
"""
from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Scalar splitmix64 finaliser, used to derive child seeds."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Combine a base seed with integer tags (frame, epoch, ...) into a new seed."""
    s = seed & _MASK
    for t in tags:
        s = mix64(s ^ mix64((t + 1) * GAMMA))
    return s


class SplitMix64:
    """Seedable splitmix64 stream.

    >>> SplitMix64(0).next_u64()
    16294208416658607535
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        start = self.state
        self.state = (start + n * GAMMA) & _MASK
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(start) + steps * np.uint64(GAMMA)
            return _mix(z)

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` doubles in ``[low, high)`` from the top 53 bits of each draw."""
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; consumes ``2 * ceil(n / 2)`` draws."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = 1.0 - u[:m], u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return std * z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in ``[0, high)``."""
        if high <= 0:
            raise ValueError(f"high must be positive, got {high}")
        idx = np.floor(self.uniform(n) * high).astype(np.int64)
        return np.minimum(idx, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        if replace:
            return self.integers(size, n)
        if size > n:
            raise ValueError(f"cannot draw {size} of {n} without replacement")
        return self.permutation(n)[:size]
