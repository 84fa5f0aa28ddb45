"""Counter-based random streams.

Every random draw in the package is addressed by ``(seed, stream_id, counter)``.
The bits for a counter come from the SplitMix64 output function applied to
``key + (counter + 1) * GOLDEN`` where ``key`` is derived from the seed and the
stream id.  Because a draw depends only on its address, a vector operation can
assign counter ``base + i`` to element ``i`` and get the same result whatever
order (or batch) the elements are processed in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_STREAM_SALT = 0xD1B54A32D192ED03

_U_GOLDEN = np.uint64(GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_U_ONE = np.uint64(1)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (reference implementation)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, stream_id: int) -> int:
    return mix64(mix64(seed + GOLDEN) ^ mix64((stream_id ^ _STREAM_SALT) & MASK64))


def reference_bits(seed: int, stream_id: int, counter: int) -> int:
    """Pure-Python bits for one counter; the oracle for the compiled kernels."""
    key = derive_key(seed, stream_id)
    return mix64(key + (counter + 1) * GOLDEN)


@numba.njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _U_M1
    z = (z ^ (z >> _S27)) * _U_M2
    return z ^ (z >> _S31)


@numba.njit(cache=True, inline="always")
def bits_at(key, counter):
    """64 random bits for ``counter`` under ``key`` (both uint64)."""
    return _mix(key + (counter + _U_ONE) * _U_GOLDEN)


@numba.njit(cache=True, inline="always")
def uniform_at(key, counter):
    """Uniform float64 in [0, 1) with 53 random bits."""
    return float(bits_at(key, counter) >> _S11) * _INV53


@numba.njit(cache=True)
def _fill_uniform(key, start, out):
    for i in range(out.shape[0]):
        out[i] = uniform_at(key, start + np.uint64(i))


@numba.njit(cache=True)
def _fill_bits(key, start, out):
    for i in range(out.shape[0]):
        out[i] = bits_at(key, start + np.uint64(i))


@dataclass
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    ``position`` is the next unused counter.  Methods that consume draws
    advance it by exactly the number of counters they use, so the same
    call sequence always produces the same values.
    """

    seed: int
    stream_id: int = 0
    position: int = 0
    key: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (0 <= self.seed <= MASK64 and 0 <= self.stream_id <= MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.key = derive_key(self.seed, self.stream_id)

    @property
    def ukey(self) -> np.uint64:
        return np.uint64(self.key)

    def take(self, n: int) -> int:
        """Reserve ``n`` counters and return the first one."""
        if n < 0:
            raise ValueError("cannot reserve a negative number of counters")
        start = self.position
        self.position += n
        return start

    def uniform(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        _fill_uniform(self.ukey, np.uint64(self.take(n)), out)
        return out

    def bits(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_bits(self.ukey, np.uint64(self.take(n)), out)
        return out

    def uniform_at(self, start: int, n: int) -> np.ndarray:
        """Uniforms for counters ``start .. start+n-1`` without moving ``position``."""
        out = np.empty(n, dtype=np.float64)
        _fill_uniform(self.ukey, np.uint64(start), out)
        return out

    def bits_at(self, start: int, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_bits(self.ukey, np.uint64(start), out)
        return out

    def spawn(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def numpy_generator(self, *tags: int) -> np.random.Generator:
        """Numpy generator for non-compression randomness (Gaussian inputs, noise)."""
        return np.random.default_rng([self.seed, self.stream_id, *tags])
