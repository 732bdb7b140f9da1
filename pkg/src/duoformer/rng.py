"""Deterministic random number generation.

Every random draw in this package flows through :class:`Rng`, which is built
on the SplitMix64 generator. SplitMix64 is a counter-based mixer, defined
bit-exactly as follows (all arithmetic modulo 2**64):

    state(k) = seed + (k + 1) * 0x9E3779B97F4A7C15
    z = state(k)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output(k) = z ^ (z >> 31)

Because output(k) depends only on (seed, k), blocks of draws vectorize over
numpy uint64 arrays and are bit-identical across platforms.

Derived values:
  * uniform double in [0, 1):   (u64 >> 11) * 2**-53
  * normal: Box-Muller on consecutive uniform pairs, with u1 mapped into
    (0, 1] as ((u64 >> 11) + 1) * 2**-53 so log(u1) is finite.
  * permutation: argsort of n raw u64 draws (stable sort; u64 ties are
    effectively impossible and would resolve by index).

Stream splitting uses :func:`stable_hash`, a documented SHA-256 based hash,
so sub-streams are reproducible and independent of iteration order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53_SCALE = float(2.0 ** -53)


def stable_hash(*parts) -> int:
    """Map any sequence of values to a stable u64 seed.

    Parts are stringified, joined with the unit separator 0x1f, UTF-8
    encoded, hashed with SHA-256, and the first 8 digest bytes are read as a
    little-endian u64. Platform and run independent.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _splitmix64(seed: int, start: int, count: int) -> np.ndarray:
    ks = np.arange(start + 1, start + 1 + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + ks * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded stream of u64s / doubles with deterministic sub-streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0

    def derive(self, *labels) -> "Rng":
        """Independent child stream; does not consume from this stream."""
        return Rng(stable_hash(self.seed, *labels))

    def next_u64(self, count: int) -> np.ndarray:
        out = _splitmix64(self.seed, self._counter, count)
        self._counter += count
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        npairs = (n + 1) // 2
        raw = self.next_u64(2 * npairs)
        u1 = ((raw[:npairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53_SCALE
        u2 = (raw[npairs:] >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def truncated_normal(self, shape=(), std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) with |z| <= bound*std, by deterministic rejection."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        filled = 0
        while filled < n:
            z = self.normal((n - filled,))
            keep = z[np.abs(z) <= bound]
            take = min(keep.size, n - filled)
            out[filled:filled + take] = keep[:take]
            filled += take
        return (std * out).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) via modulo reduction (documented bias < 2**-53)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = np.uint64(high - low)
        vals = (self.next_u64(n) % span).astype(np.int64) + low
        return vals.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def choice_bool(self, shape=()) -> np.ndarray:
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return ((self.next_u64(n) & np.uint64(1)) == np.uint64(1)).reshape(shape)


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
