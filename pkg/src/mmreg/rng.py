"""Deterministic pseudo-random number generation.

Every stochastic artifact in the package (augmented datasets, phantom
benchmarks, network initialisation, batch order) must be reproducible
bit-for-bit from a single 64-bit seed on any platform, so random draws
are pinned to one generator family implemented here rather than to a
host library whose stream may change between versions:

* splitmix64 derives child seeds and seeds the main generator, and
* xoshiro256++ produces the actual 64-bit draws.

Floating-point outputs use the top 53 bits of a draw, giving uniforms on
``[0, 1)`` with spacing 2^-53. Normals come from a Box-Muller transform
with the spare value cached. Bounded integers use the draw modulo n; the
modulo bias is irrelevant at the sizes used here and the simple rule is
easy to reproduce elsewhere.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0**-53


def _mix64(z: int) -> int:
    """The splitmix64 output scrambler."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(output, new_state)``."""
    state = (state + _GOLDEN) & _MASK
    return _mix64(state), state


def derive_seed(seed: int, index: int) -> int:
    """Child seed for stream ``index``: the index-th splitmix64 output.

    Stateless closed form of running splitmix64 ``index + 1`` steps from
    ``seed``, so derived streams never overlap the parent stream and the
    cost does not grow with the index.
    """
    if index < 0:
        raise ParameterError(f"stream index must be >= 0, got {index}")
    return _mix64((seed + (index + 1) * _GOLDEN) & _MASK)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256pp:
    """xoshiro256++ generator seeded via splitmix64."""

    def __init__(self, seed: int):
        state = int(seed) & _MASK
        s = []
        for _ in range(4):
            out, state = splitmix64(state)
            s.append(out)
        self._s = s
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def _bulk_u64(self, n: int) -> np.ndarray:
        """n consecutive draws as a uint64 array (hot path for fields)."""
        s0, s1, s2, s3 = self._s
        out = np.empty(n, dtype=np.uint64)
        for i in range(n):
            out[i] = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def uniform01(self) -> float:
        """Uniform double on [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_signed(self) -> float:
        """Uniform double on [-1, 1)."""
        return 2.0 * self.uniform01() - 1.0

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform01()

    def uniform_signed_array(self, n: int) -> np.ndarray:
        """n uniforms on [-1, 1) as a float64 array, in draw order."""
        bits = self._bulk_u64(n) >> np.uint64(11)
        return 2.0 * (bits.astype(np.float64) * _INV_2_53) - 1.0

    def normal(self) -> float:
        """Standard normal via Box-Muller; the second value is cached."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # open-interval uniform so log() is finite
        u1 = ((self.next_u64() >> 11) + 1) * _INV_2_53
        u2 = (self.next_u64() >> 11) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        self._spare_normal = float(r * np.sin(theta))
        return float(r * np.cos(theta))

    def normal_array(self, n: int) -> np.ndarray:
        """n standard normals, consuming the stream in pairs."""
        m = (n + 1) // 2
        bits = self._bulk_u64(2 * m) >> np.uint64(11)
        u = bits.astype(np.float64) * _INV_2_53
        u1 = u[0::2] + _INV_2_53  # shift into (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        pairs = np.empty(2 * m, dtype=np.float64)
        pairs[0::2] = r * np.cos(theta)
        pairs[1::2] = r * np.sin(theta)
        return pairs[:n]

    def next_below(self, n: int) -> int:
        """Integer in [0, n) as draw mod n."""
        if n <= 0:
            raise ParameterError(f"next_below needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def weighted_choice(self, weights) -> int:
        """Index drawn with probability proportional to ``weights``."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ParameterError("weights must be nonnegative with a positive sum")
        cum = np.cumsum(w / w.sum())
        u = self.uniform01()
        return int(np.searchsorted(cum, u, side="right").clip(0, w.size - 1))
