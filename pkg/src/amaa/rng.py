"""Deterministic 64-bit PRNG used for scene generation and weight init.

The generator is the splitmix64 sequence: for a seed ``s``, the k-th raw
output (k = 1, 2, ...) is ``mix64(s + k * GOLDEN)`` where

    GOLDEN = 0x9E3779B97F4A7C15
    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

with all arithmetic modulo 2**64. Because the k-th output depends only on
(seed, k), streams are reproducible across platforms and the whole state is
one integer. Floats are drawn by taking the top 53 bits, giving uniforms in
[0, 1).

``derive`` builds independent child seeds from a parent seed and a string
label (FNV-1a of the label folded into the parent, then scrambled), so the
scene stream, the augmentation stream, and each parameter's init stream never
overlap even though they come from one user-facing seed.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """One splitmix64 finalizer round on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive(seed: int, label: str) -> int:
    """Child seed for (seed, label), stable across runs and platforms."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return mix64((seed ^ h) & _MASK)


class SplitMix64:
    """Stateful wrapper over the splitmix64 sequence for one seed."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_raw(self) -> int:
        """Next raw 64-bit output."""
        self._state = (self._state + _GOLDEN) & _MASK
        return mix64(self._state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_raw() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        """Uniform in [low, high)."""
        return low + (high - low) * self.next_float()

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive. Requires low <= high."""
        if high < low:
            raise ValueError(f"randint bounds reversed: [{low}, {high}]")
        span = high - low + 1
        # Rejection sampling keeps the draw exactly uniform.
        limit = (_MASK + 1) - ((_MASK + 1) % span)
        while True:
            r = self.next_raw()
            if r < limit:
                return low + (r % span)

    def choice(self, items):
        """One element of a non-empty sequence, uniformly."""
        if len(items) == 0:
            raise ValueError("choice on empty sequence")
        return items[self.randint(0, len(items) - 1)]

    def uniform_array(self, n: int, low: float, high: float):
        """n uniforms in [low, high) as a float64 array, same stream as uniform()."""
        import numpy as np

        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.next_float()
        return low + (high - low) * out
