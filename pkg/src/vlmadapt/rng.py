"""Deterministic pseudo-randomness for the whole repo.

Every stochastic choice (parameter init, shuffles, scene sampling, augmentation)
flows from a single root seed through splitmix64-derived sub-seeds feeding a
xoshiro256** generator. No global RNG state anywhere.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (output, next_state)."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64, state


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def derive_seed(root: int, *tags: int | str) -> int:
    """Derive a sub-seed from a root seed and a sequence of tags.

    String tags are hashed with FNV-1a; each tag is folded in through one
    splitmix64 step, so derive_seed(s, a, b) != derive_seed(s, b, a).
    """
    state = root & MASK64
    for tag in tags:
        value = _fnv1a(tag) if isinstance(tag, str) else (tag & MASK64)
        out, _ = splitmix64(state ^ value)
        state = out
    return state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** seeded via splitmix64 expansion of a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        state = self.seed
        s = []
        for _ in range(4):
            out, state = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def normal(self) -> float:
        """One standard normal draw (Box-Muller, cached pair not kept)."""
        u1 = self.next_float()
        while u1 <= 0.0:
            u1 = self.next_float()
        u2 = self.next_float()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape: tuple[int, ...] | int, scale: float = 1.0) -> np.ndarray:
        if isinstance(shape, int):
            shape = (shape,)
        n = 1
        for d in shape:
            n *= d
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        if scale != 1.0:
            out *= scale
        return out.reshape(shape)

    def uniforms(self, shape: tuple[int, ...] | int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if isinstance(shape, int):
            shape = (shape,)
        n = 1
        for d in shape:
            n *= d
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.next_float()
        if lo != 0.0 or hi != 1.0:
            out = lo + (hi - lo) * out
        return out.reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ValueError(f"cannot sample {k} from population of {n}")
        idx = list(range(n))
        self.shuffle(idx)
        return idx[:k]

    def choice(self, items: list):
        return items[self.next_below(len(items))]
