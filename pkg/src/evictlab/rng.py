"""Portable counter-based random numbers.

Every draw is ``splitmix64(key + counter * 0x9E3779B97F4A7C15)`` where the
key is derived from the seed and a tuple of integer stream ids. Uniforms
take the top 53 bits; normals are Irwin-Hall sums of twelve uniforms minus
six. Only integer mixing, +, x and / are involved, so any language with
64-bit unsigned arithmetic reproduces the same bits.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_key(seed: int, *stream: int) -> int:
    key = mix64(seed & MASK64)
    for sid in stream:
        key = mix64(key ^ ((sid * GAMMA + 1) & MASK64))
    return key


class CounterRNG:
    """Sequential reader over one splitmix64 counter stream."""

    def __init__(self, seed: int, *stream: int):
        self.key = derive_key(seed, *stream)
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
            return _mix64_array(z)

    def uniform(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((n, 12))
        acc = u[:, 0].copy()
        for c in range(1, 12):
            acc += u[:, c]
        return (acc - 6.0).reshape(shape)
