"""Deterministic splittable PRNG (SplitMix64).

Every stochastic piece of the package (synthetic data, parameter init,
epoch shuffling) draws from this generator rather than a platform RNG, so
the exact bit stream is pinned by the algorithm: state advances by the
64-bit golden-ratio constant and outputs pass through the SplitMix64
finalizer. Substreams are derived with :func:`derive`, which lets each
image or component own an independent deterministic stream.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    """SplitMix64 output finalizer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, key: int) -> int:
    """Derive the seed of an independent substream from (seed, key)."""
    return _mix((seed + _GOLDEN * (key + 1)) & _MASK)


class SplitMix64:
    """Stateful SplitMix64 stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK
        self._gauss_cache: float | None = None

    def split(self, key: int) -> "SplitMix64":
        """Independent substream keyed off the *initial* seedless state."""
        return SplitMix64(derive(self._state, key))

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform double in [lo, hi) with 53 random bits."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Integer in [0, n). floor(u53 * n); bias is < n / 2^53."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Gaussian via Box-Muller; caches the second variate."""
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
            return mu + sigma * z
        # u1 in (0, 1] so log() stays finite
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        self._gauss_cache = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
