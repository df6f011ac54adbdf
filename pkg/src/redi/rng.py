"""Counter-based pseudo-random numbers built on the splitmix64 finalizer.

Draws are a pure function of (key, counter), so any stream can be replayed
or split without hidden global state.  Streams for distinct purposes are
derived from a parent key and a text label; the derivation is stable across
runs, platforms, and draw order, which is what makes training byte-for-byte
reproducible.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    """splitmix64 output function on a python int (mod 2**64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def _fnv1a(label: str) -> int:
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class Stream:
    """One independent random stream: a 64-bit key plus a draw counter."""

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key & _MASK
        self.counter = counter

    @classmethod
    def from_seed(cls, seed: int) -> "Stream":
        return cls(_mix(seed ^ 0x5851F42D4C957F2D))

    def derive(self, label: str, index: int = 0) -> "Stream":
        """Child stream for a named purpose; `index` splits per-item streams."""
        k = _mix(self.key ^ _fnv1a(label))
        k = _mix(k + (index & _MASK) * _GAMMA)
        return Stream(k)

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit draws."""
        base = np.uint64(self.key)
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = base + idx * np.uint64(_GAMMA)
        return _mix_array(z)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """float32 uniforms in [lo, hi) with 24-bit resolution."""
        u = (self.u64(n) >> np.uint64(40)).astype(np.float32)
        u *= np.float32(2.0 ** -24)
        if lo != 0.0 or hi != 1.0:
            u = u * np.float32(hi - lo) + np.float32(lo)
        return u

    def he_uniform(self, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        """Weight init: uniform in +-sqrt(6/fan_in)."""
        bound = math.sqrt(6.0 / float(fan_in))
        n = int(np.prod(shape))
        return self.uniform(n, -bound, bound).reshape(shape)

    def below(self, bound: int) -> int:
        """One integer in [0, bound). Modulo bias is negligible at 64 bits."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.u64(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting 64-bit keys."""
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")
