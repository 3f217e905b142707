"""Deterministic pseudo-random numbers.

A 64-bit seed is expanded with splitmix64 into the 256-bit state of a
xoshiro256** generator.  Doubles take the top 53 bits of each output word:
(word >> 11) * 2**-53, uniform in [0, 1).  The stream for a given seed is
identical on every platform, which is what makes weight init, dropout masks,
and therefore whole checkpoints reproducible byte for byte.
"""

import numpy as np

_MASK = (1 << 64) - 1
_TO_DOUBLE = 2.0 ** -53


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output word)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, (z ^ (z >> 31))


class Rng:
    """xoshiro256** stream seeded via splitmix64 expansion.

    Single-owner object: state advances on every draw, so share one instance
    only when the draw order is itself part of the contract.
    """

    def __init__(self, seed: int):
        sm = int(seed) & _MASK
        words = []
        for _ in range(4):
            sm, w = splitmix64(sm)
            words.append(w)
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK
        result = ((((x << 7) | (x >> 57)) & _MASK) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self._s = [s0, s1, s2, s3]
        return result

    def next_double(self) -> float:
        """Uniform double in [0, 1) with a full 53-bit mantissa."""
        return (self.next_u64() >> 11) * _TO_DOUBLE

    def doubles(self, count: int) -> np.ndarray:
        """Next ``count`` doubles as a 1-D array.  Same stream as next_double."""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        out = np.empty(count, dtype=np.float64)
        s0, s1, s2, s3 = self._s
        for i in range(count):
            x = (s1 * 5) & _MASK
            r = ((((x << 7) | (x >> 57)) & _MASK) * 9) & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
            out[i] = (r >> 11) * _TO_DOUBLE
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self, lo: float, hi: float, rows: int, cols: int) -> np.ndarray:
        """(rows, cols) matrix of uniforms in [lo, hi), filled row-major."""
        if not (lo < hi):
            raise ValueError(f"uniform requires lo < hi, got [{lo}, {hi})")
        if rows < 1 or cols < 1:
            raise ValueError(f"matrix dimensions must be positive, got {rows}x{cols}")
        u = self.doubles(rows * cols)
        vals = lo + u * (hi - lo)
        # Rounding of lo + u*(hi-lo) can land exactly on hi when the interval
        # is a few ulps wide; clamp to keep the half-open contract.
        np.minimum(vals, np.nextafter(hi, lo), out=vals)
        return vals.reshape(rows, cols)
