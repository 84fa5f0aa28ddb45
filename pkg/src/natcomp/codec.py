"""Bit-exact wire formats for compressed vectors.

Block layout (all integers little-endian)::

    magic "NCMP" | version 0x01 | codec id | d (u64) | codec params | payload

Codecs:

* ``NAT9``  -- 9 bits per scalar: sign bit then the 8-bit binary32 exponent
  field.  Field 0 encodes zero, field 255 is reserved.
* ``NAT8C`` -- 8 bits per scalar: zero flag, sign, 6-bit offset ``k + 50`` for
  the value ``+-2^k``; exponents are clipped into ``[-50, 10]``.  The zero code
  is ``0x80``.
* ``DITHER`` -- params ``p`` (1, 2 or 255 for inf), ``s``, norm mode and the
  norm (4-byte binary32, or 2 bytes sign/exponent when nat-compressed); then
  per coordinate one sign bit and ``ceil(log2(s+1))`` level-index bits.

Payloads are packed most-significant-bit first and zero-padded to a byte.
"""
from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import EncodeError, FormatError, InvalidInputError
from .operators import NormMode, dense_vector

MAGIC = b"NCMP"
VERSION = 1
NAT9 = 0x01
NAT8C = 0x02
DITHER = 0x03
HEADER = struct.Struct("<4sBBQ")

NAT8C_MIN_EXP = -50
NAT8C_MAX_EXP = 10
NAT8C_ZERO = 0x80

_P_CODES = {1.0: 1, 2.0: 2, float("inf"): 255}
_P_FROM_CODE = {v: k for k, v in _P_CODES.items()}
_MODE_CODES = {NormMode.EXACT: 0, NormMode.NAT: 1}
_MODE_FROM_CODE = {v: k for k, v in _MODE_CODES.items()}


@dataclass(frozen=True)
class Binary32Fields:
    sign: int
    exponent: int
    mantissa: int  # 23-bit integer; the fraction is mantissa / 2**23

    @property
    def fraction(self) -> float:
        return self.mantissa / 2.0 ** 23

    def mantissa_bit(self, j: int) -> int:
        """Bit ``m_j`` (weight ``2^-j``), ``1 <= j <= 23``."""
        return (self.mantissa >> (23 - j)) & 1

    def value(self) -> float:
        """Reconstruct the normal number the fields describe."""
        return (-1.0) ** self.sign * 2.0 ** (self.exponent - 127) * (1.0 + self.fraction)

    def to_bits(self) -> int:
        return (self.sign << 31) | (self.exponent << 23) | self.mantissa


def split_binary32(t: float) -> Binary32Fields:
    """Split a binary32 value into sign, biased exponent and mantissa fields."""
    if not math.isfinite(t):
        raise InvalidInputError(f"cannot split non-finite value {t!r}")
    with np.errstate(over="ignore"):
        f = np.float32(t)
    if not np.isfinite(f):
        raise InvalidInputError(f"{t!r} overflows binary32")
    bits = int(f.view(np.uint32))
    return Binary32Fields(bits >> 31, (bits >> 23) & 0xFF, bits & 0x7FFFFF)


# ---------------------------------------------------------------------------
# bit packing

def pack_fields(values: np.ndarray, width: int) -> bytes:
    """Pack unsigned ``values`` as ``width``-bit fields, MSB first."""
    values = np.asarray(values, dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_fields(data: bytes, count: int, width: int) -> np.ndarray:
    nbits = count * width
    if len(data) * 8 < nbits:
        raise FormatError("payload truncated")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=nbits)
    bits = bits.reshape(count, width).astype(np.uint64)
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (bits * weights).sum(axis=1, dtype=np.uint64)


def _header(codec: int, d: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, codec, d)


def payload_bytes(bits: int) -> int:
    return (bits + 7) // 8


# ---------------------------------------------------------------------------
# NAT9 / NAT8C

def _power_of_two_fields(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign bits and binary32 exponent fields; rejects anything else."""
    bits = x.view(np.uint32)
    sign = (bits >> 31).astype(np.uint64)
    exp = ((bits >> 23) & 0xFF).astype(np.uint64)
    mant = bits & 0x7FFFFF
    zero = (exp == 0) & (mant == 0)
    bad = (mant != 0) | ((exp == 0) & ~zero)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise EncodeError(f"coordinate {i} ({x[i]!r}) is not zero or a power of two")
    if np.any(exp == 255):
        raise EncodeError("exponent field 255 is reserved")
    sign[zero] = 0
    return sign, exp


def encode_nat9(x) -> bytes:
    """Encode a vector of signed powers of two (or zeros) at 9 bits per scalar."""
    x = dense_vector(x)
    sign, exp = _power_of_two_fields(x)
    return _header(NAT9, x.size) + pack_fields((sign << np.uint64(8)) | exp, 9)


def nat8c_codes(x) -> tuple[np.ndarray, int]:
    """Byte codes for NAT8C and the number of clipped exponents."""
    x = dense_vector(x)
    sign, exp = _power_of_two_fields(x)
    zero = exp == 0
    k = exp.astype(np.int64) - 127
    clipped = int(np.count_nonzero(~zero & ((k < NAT8C_MIN_EXP) | (k > NAT8C_MAX_EXP))))
    offset = np.clip(k, NAT8C_MIN_EXP, NAT8C_MAX_EXP) - NAT8C_MIN_EXP
    codes = ((sign.astype(np.int64) << 6) | offset).astype(np.uint8)
    codes[zero] = NAT8C_ZERO
    return codes, clipped


def nat8c_values(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    offset = (codes & 0x3F).astype(np.int64)
    if np.any(((codes & 0x80) == 0) & (offset > NAT8C_MAX_EXP - NAT8C_MIN_EXP)):
        raise FormatError("NAT8C exponent offset outside 0..60")
    if np.any(((codes & 0x80) != 0) & (codes != NAT8C_ZERO)):
        raise FormatError("NAT8C zero code with sign/offset bits set")
    mag = np.ldexp(np.float32(1.0), (offset + NAT8C_MIN_EXP).astype(np.int32)).astype(np.float32)
    out = np.where(codes & 0x40, -mag, mag).astype(np.float32)
    out[codes == NAT8C_ZERO] = 0.0
    return out


def encode_nat8c(x) -> tuple[bytes, int]:
    """Encode at 8 bits per scalar; returns ``(block, clip_count)``."""
    codes, clipped = nat8c_codes(x)
    return _header(NAT8C, codes.size) + codes.tobytes(), clipped


# ---------------------------------------------------------------------------
# DITHER

def level_bits(s: int) -> int:
    """Bits per level index for a ladder with ``s + 1`` codes."""
    return max(1, math.ceil(math.log2(s + 1)))


@dataclass(frozen=True)
class DitherParams:
    p_norm: float
    s_levels: int
    geometric: bool
    norm_mode: NormMode
    norm: float


def _norm_field(norm: float, mode: NormMode) -> bytes:
    if mode is NormMode.EXACT:
        return struct.pack("<f", norm)
    f = split_binary32(norm)
    if f.mantissa:
        raise EncodeError("nat-compressed norm must be a power of two or zero")
    return bytes([f.sign, f.exponent])


def encode_dither(signs, level_indices, norm: float, *, p_norm: float, s_levels: int,
                  geometric: bool, norm_mode: NormMode | str = NormMode.EXACT) -> bytes:
    """Encode a dithered vector: the norm, one sign bit and a level index per coordinate.

    ``signs`` holds +-1 per coordinate (0 is read as positive); index
    ``s_levels`` is the zero level.
    """
    norm_mode = NormMode(norm_mode)
    levels = np.asarray(level_indices, dtype=np.int64)
    sg = np.asarray(signs)
    if levels.ndim != 1 or sg.shape != levels.shape or levels.size == 0:
        raise EncodeError("signs and level indices must be equal-length vectors")
    if np.any(levels < 0) or np.any(levels > s_levels):
        raise EncodeError(f"level index outside 0..{s_levels}")
    if not 1 <= s_levels <= 255:
        raise EncodeError("the DITHER format holds 1 <= s <= 255")
    if p_norm not in _P_CODES:
        raise EncodeError(f"unsupported norm {p_norm!r}")
    sign_bits = (sg < 0).astype(np.uint64)
    width = level_bits(s_levels)
    fields = (sign_bits << np.uint64(width)) | levels.astype(np.uint64)
    params = struct.pack("<BBBB", _P_CODES[p_norm], s_levels, _MODE_CODES[norm_mode], int(geometric))
    return (_header(DITHER, levels.size) + params + _norm_field(norm, norm_mode)
            + pack_fields(fields, width + 1))


def dither_payload_bits(d: int, s: int, norm_mode: NormMode = NormMode.EXACT) -> int:
    """Bits for the norm plus ``d`` sign/level fields (excluding the header)."""
    norm_bits = 32 if norm_mode is NormMode.EXACT else 16
    return norm_bits + d * (1 + level_bits(s))


# ---------------------------------------------------------------------------
# decoding

@dataclass
class DecodedBlock:
    codec: int
    values: np.ndarray
    dither: DitherParams | None = None
    signs: np.ndarray | None = None
    levels: np.ndarray | None = None


def decode(block: bytes) -> DecodedBlock:
    """Inverse of the matching encoder; raises :class:`FormatError` on bad input."""
    block = bytes(block)
    if len(block) < HEADER.size:
        raise FormatError("block shorter than header")
    magic, version, codec, d = HEADER.unpack_from(block)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if d == 0:
        raise FormatError("empty vector")
    body = block[HEADER.size:]
    if codec == NAT9:
        expected = payload_bytes(9 * d)
        if len(body) != expected:
            raise FormatError(f"NAT9 payload is {len(body)} bytes, expected {expected}")
        fields = unpack_fields(body, d, 9)
        sign = (fields >> np.uint64(8)).astype(np.uint32)
        exp = (fields & np.uint64(0xFF)).astype(np.uint32)
        if np.any(exp == 255):
            raise FormatError("reserved exponent field 255")
        if np.any((exp == 0) & (sign == 1)):
            raise FormatError("zero code with sign bit set")
        values = ((sign << 31) | (exp << 23)).view(np.float32)
        return DecodedBlock(NAT9, values)
    if codec == NAT8C:
        if len(body) != d:
            raise FormatError(f"NAT8C payload is {len(body)} bytes, expected {d}")
        return DecodedBlock(NAT8C, nat8c_values(np.frombuffer(body, dtype=np.uint8)))
    if codec == DITHER:
        if len(body) < 4:
            raise FormatError("DITHER params truncated")
        p_code, s, mode_code, geometric = struct.unpack_from("<BBBB", body)
        if p_code not in _P_FROM_CODE or mode_code not in _MODE_FROM_CODE or s == 0 or geometric > 1:
            raise FormatError("bad DITHER params")
        mode = _MODE_FROM_CODE[mode_code]
        pos = 4
        if mode is NormMode.EXACT:
            if len(body) < pos + 4:
                raise FormatError("norm truncated")
            (norm,) = struct.unpack_from("<f", body, pos)
            pos += 4
        else:
            if len(body) < pos + 2:
                raise FormatError("norm truncated")
            sgn, exp = body[pos], body[pos + 1]
            if sgn > 1 or exp == 255:
                raise FormatError("bad compressed norm")
            norm = float(np.uint32((sgn << 31) | (exp << 23)).view(np.float32))
            pos += 2
        width = level_bits(s)
        expected = payload_bytes(d * (width + 1))
        if len(body) - pos != expected:
            raise FormatError(f"DITHER payload is {len(body) - pos} bytes, expected {expected}")
        fields = unpack_fields(body[pos:], d, width + 1)
        levels = (fields & np.uint64((1 << width) - 1)).astype(np.int32)
        signs = (fields >> np.uint64(width)).astype(np.uint8)
        if np.any(levels > s):
            raise FormatError("level index above s")
        values = np.empty(d, dtype=np.float32)
        K.reconstruct_dither(levels, signs, np.float32(norm), bool(geometric), s, values)
        params = DitherParams(_P_FROM_CODE[p_code], s, bool(geometric), mode, float(norm))
        return DecodedBlock(DITHER, values, params, signs, levels)
    raise FormatError(f"unknown codec id {codec}")


# ---------------------------------------------------------------------------
# exponent statistics

@dataclass
class ExponentHistogram:
    counts: dict[int, int]
    zeros: int

    @property
    def min_exponent(self) -> int | None:
        return min(self.counts) if self.counts else None

    @property
    def max_exponent(self) -> int | None:
        return max(self.counts) if self.counts else None


def exponent_histogram(x) -> ExponentHistogram:
    """Counts of ``floor(log2 |x_i|)`` over the nonzero entries, zeros separately."""
    x = dense_vector(x).astype(np.float64)
    nz = x[x != 0]
    _, e = np.frexp(nz)
    counts = Counter((e - 1).tolist())
    return ExponentHistogram(dict(sorted(counts.items())), int(x.size - nz.size))
