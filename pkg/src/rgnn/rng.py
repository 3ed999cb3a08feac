"""Seedable splitmix64 random streams.

Every source of randomness in this package is an explicit ``SplitMix64``
instance owned by the caller; there is no hidden global state.  Derived
streams (``derive`` / ``stream``) are keyed by strings and integers so that
per-image or per-parameter randomness is independent of iteration order,
which is what makes parallel and serial runs bit-identical.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """The splitmix64 output mix, a 64-bit bijection."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _hash_key(key) -> int:
    """Stable 64-bit hash for stream derivation keys (str or int)."""
    if isinstance(key, bool):  # bool is an int subclass; keep it distinct
        key = f"b{int(key)}"
    if isinstance(key, int):
        return mix64(key ^ 0xD1B54A32D192ED03)
    if isinstance(key, str):
        h = _FNV_OFFSET
        for b in key.encode("utf-8"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
        return h
    raise TypeError(f"unsupported stream key type: {type(key).__name__}")


class SplitMix64:
    """64-bit-state counter RNG with identical scalar and vector paths.

    The n-th output is ``mix64(seed + n*GOLDEN)``, so block generation via
    numpy produces exactly the same sequence as repeated ``next_u64`` calls.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    @property
    def state(self) -> int:
        return self._state

    def set_state(self, state: int) -> None:
        self._state = state & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return mix64(self._state)

    def next_float(self) -> float:
        # 53 uniform mantissa bits in [0, 1)
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * self.next_float()

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        # Box-Muller, one value per call (no cached spare, keeps state simple)
        u1 = self.next_float()
        u2 = self.next_float()
        while u1 == 0.0:
            u1 = self.next_float()
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return mean + std * float(z)

    def randint(self, n: int) -> int:
        """Integer in [0, n) via 64-bit rejection sampling (unbiased)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            v = self.next_u64()
            if v <= limit:
                return v % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def fill_uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Vectorized batch of `n` uniforms, bit-equal to n next_float calls."""
        counters = (
            np.uint64(self._state)
            + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        )
        z = counters
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & _MASK64
        return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53) * (hi - lo) + lo

    def derive(self, *keys) -> "SplitMix64":
        """Child stream keyed by `keys`; independent of this stream's state."""
        h = self._state
        for k in keys:
            h = mix64(h ^ _hash_key(k))
        return SplitMix64(h)


def stream(seed: int, *keys) -> SplitMix64:
    """Named stream derived from a base seed, e.g. stream(7, "init", "W1")."""
    return SplitMix64(seed).derive(*keys) if keys else SplitMix64(seed)
