"""Deterministic seeded randomness built on splitmix64.

Every stochastic choice in the project (parameter init, shuffling,
augmentation draws, evaluation sampling) flows through a SplitMix64
stream derived from a 64-bit seed plus a tag path, so results are
reproducible bit-for-bit and independent of execution order.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive(seed: int, *parts: int | str) -> int:
    """Fold tags into a seed to produce an independent sub-seed.

    Strings are hashed with FNV-1a (stable across processes, unlike
    Python's salted ``hash``); ints enter directly.
    """
    state = _mix(seed & _MASK64)
    for part in parts:
        value = _fnv1a(part) if isinstance(part, str) else part & _MASK64
        state = _mix((state ^ value) + _GOLDEN)
    return state


class SplitMix64:
    """Counter-based splitmix64 stream: cheap to fork, trivially vectorized."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_index(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"next_index needs n >= 1, got {n}")
        return min(int(self.next_float() * n), n - 1)

    def floats(self, n: int) -> np.ndarray:
        """Vectorized batch of ``n`` uniform [0, 1) draws.

        Emits the same sequence as repeated ``next_float`` calls.
        """
        if n == 0:
            return np.zeros(0)
        base = np.uint64(self._state)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        counters = base + steps
        self._state = int(counters[-1])
        z = counters
        z = z ^ (z >> np.uint64(30))
        z = z * np.uint64(0xBF58476D1CE4E5B9)
        z = z ^ (z >> np.uint64(27))
        z = z * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on paired uniform draws."""
        m = (n + 1) // 2
        u1 = self.floats(m)
        u2 = self.floats(m)
        u1 = np.maximum(u1, 2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.next_index(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
