"""Compiled row kernels behind the public operators.

All kernels work on 2-D arrays where each row is one independent draw.  The
random counter for row ``r`` and slot ``i`` is ``base + r * stride + offset + i``;
``stride`` is the number of counters one full compression of a row consumes.
"""
import math

import numba
import numpy as np
from numba import types
from numba.extending import intrinsic

from .rng import uniform_at

_SIGN = np.uint32(0x80000000)
_EXP_MASK = np.uint32(0xFF)
_MANT_MASK = np.uint32(0x7FFFFF)
_TWO23 = 8388608.0

P_INF = 0  # norm selector code for the max norm


@intrinsic
def _f64_bits(typingctx, x):
    """Reinterpret a float64 as its uint64 bit pattern (no memory round trip)."""
    sig = types.uint64(types.float64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.uint64))

    return sig, codegen


@numba.njit(cache=True, inline="always")
def _counter(base, r, stride, offset, i):
    return np.uint64(base + r * stride + offset + i)


@numba.njit(cache=True, inline="always")
def nat_bits(b, u):
    """Natural compression of one binary32 bit pattern given a uniform draw.

    Returns the output bit pattern; 0xFFFFFFFF flags an exponent overflow.
    Zero and subnormal inputs map to +0.
    """
    e = (b >> np.uint32(23)) & _EXP_MASK
    if e == 0:
        return np.uint32(0)
    m = b & _MANT_MASK
    low = b & ~_MANT_MASK
    if m == 0:
        return low
    p_low = 1.0 - np.float64(m) / _TWO23
    if u < p_low:
        return low
    if e + 1 == 255:
        return np.uint32(0xFFFFFFFF)
    return (b & _SIGN) | ((e + np.uint32(1)) << np.uint32(23))


@numba.njit(cache=True)
def nat_rows(src, dst, key, base, stride, offset):
    overflow = 0
    rows, d = src.shape
    shared = src.strides[0] == 0
    row = np.empty(d, dtype=np.uint32)
    for r in range(rows):
        if r == 0 or not shared:
            for i in range(d):
                row[i] = src[r, i]
        for i in range(d):
            b = row[i]
            if (b & _MANT_MASK) == 0 or (b & _EXP_MASK << np.uint32(23)) == 0:
                # deterministic input: the reserved counter is left unused
                dst[r, i] = b & ~_MANT_MASK if (b >> np.uint32(23)) & _EXP_MASK else np.uint32(0)
                continue
            u = uniform_at(key, _counter(base, r, stride, offset, i))
            out = nat_bits(b, u)
            if out == np.uint32(0xFFFFFFFF):
                overflow += 1
                out = (b & _SIGN) | np.uint32(0x7F800000)
            dst[r, i] = out
    return overflow


@numba.njit(cache=True)
def int_rows(src, dst, key, base, stride, offset):
    rows, d = src.shape
    for r in range(rows):
        for i in range(d):
            u = uniform_at(key, _counter(base, r, stride, offset, i))
            v = np.float64(src[r, i])
            fl = math.floor(v)
            if fl == v:
                dst[r, i] = src[r, i]
            elif u < (fl + 1.0) - v:
                dst[r, i] = fl
            else:
                dst[r, i] = fl + 1.0


@numba.njit(cache=True)
def sparsify_rows(src, dst, q, key, base, stride, offset):
    rows, d = src.shape
    scale = d / q
    idx = np.empty(d, dtype=np.int64)
    for r in range(rows):
        for i in range(d):
            idx[i] = i
            dst[r, i] = 0.0
        # partial Fisher-Yates: idx[:q] becomes a uniform q-subset
        for i in range(q):
            u = uniform_at(key, _counter(base, r, stride, offset, i))
            j = i + int(u * (d - i))
            if j >= d:
                j = d - 1
            t = idx[i]
            idx[i] = idx[j]
            idx[j] = t
        for i in range(q):
            k = idx[i]
            dst[r, k] = np.float64(src[r, k]) * scale


@numba.njit(cache=True, inline="always")
def level_value(geometric, s, u):
    """Value of ladder level ``u`` (``u == s`` is the zero level)."""
    if u >= s:
        return 0.0
    if geometric:
        return math.ldexp(1.0, -u)
    return (s - u) / s


@numba.njit(cache=True, inline="always")
def bracket(geometric, s, y):
    """Return (upper_index, p_low) with l_{upper+1} <= y <= l_upper.

    ``p_low`` is the probability of rounding to the lower level.
    """
    if y >= 1.0:
        return 0, 0.0
    if y <= 0.0:
        return s - 1, 1.0
    if geometric:
        smallest = math.ldexp(1.0, 1 - s)
        if y < smallest:
            return s - 1, 1.0 - y / smallest
        m, e = math.frexp(y)
        # y in [2^(e-1), 2^e): levels 2^e (index -e) above, 2^(e-1) below
        upper = math.ldexp(1.0, e)
        return -e, (upper - y) / (upper - 0.5 * upper)
    j = int(math.floor(y * s))
    if j >= s:
        j = s - 1
    while j > 0 and j / s > y:
        j -= 1
    while j + 1 < s and (j + 1) / s <= y:
        j += 1
    upper = (j + 1) / s
    return s - j - 1, (upper - y) * s


@numba.njit(cache=True)
def row_norm(x, p_code):
    acc = 0.0
    if p_code == 1:
        for v in x:
            acc += abs(np.float64(v))
        return acc
    if p_code == 2:
        for v in x:
            acc += np.float64(v) * np.float64(v)
        return math.sqrt(acc)
    for v in x:
        a = abs(np.float64(v))
        if a > acc:
            acc = a
    return acc


@numba.njit(cache=True)
def level_table(geometric, s):
    """Levels ``l_0 .. l_s`` followed by one extra zero sentinel."""
    table = np.zeros(s + 2)
    for u in range(s):
        table[u] = level_value(geometric, s, u)
    return table


@numba.njit(cache=True)
def dither_rows(src, dst, geometric, s, p_code, nat_norm, key, base, stride, offset,
                levels, signs, norms):
    """General dithering of every row.

    ``levels``/``signs`` receive per-coordinate ladder indices and sign bits
    and ``norms`` the transmitted norm; pass arrays with zero rows to skip.
    Consumes ``d + 1`` counters per row, the last for the norm draw.

    Everything except the draws depends only on the row, so a broadcast
    batch (row stride 0) brackets the coordinates once.
    """
    rows, d = src.shape
    keep = levels.shape[0] > 0
    shared = src.strides[0] == 0
    table = level_table(geometric, s)
    scratch = np.empty(1, dtype=np.float32)
    scratch_bits = scratch.view(np.uint32)
    xr = np.empty(d)
    gap = np.empty(d)    # top level minus y
    width = np.empty(d)  # top level minus the level below
    upper = np.empty(d)  # signed top level
    lower = np.empty(d)  # signed level below
    bracket = np.empty(d, dtype=np.int64)
    norm = 0.0
    for r in range(rows):
        if r == 0 or not shared:
            for i in range(d):
                xr[i] = src[r, i]
            norm = np.float64(np.float32(row_norm(xr, p_code)))
            if norm != 0.0:
                for i in range(d):
                    y = abs(xr[i]) / norm
                    if geometric:
                        # y in [2^e, 2^(e+1)) lies between levels -e-1 and -e
                        hi = 1022 - int(_f64_bits(y) >> np.uint64(52))
                    else:
                        # an off-by-one bracket from rounding in y*s only happens when y
                        # sits on a level, and the comparison below then returns it exactly
                        hi = s - 1 - int(y * s)
                    hi = min(max(hi, 0), s - 1)
                    bracket[i] = hi
                    gap[i] = table[hi] - y
                    width[i] = table[hi] - table[hi + 1]
                    upper[i] = math.copysign(table[hi], xr[i])
                    lower[i] = math.copysign(table[hi + 1], xr[i])
        wire = norm
        if nat_norm:
            u = uniform_at(key, _counter(base, r, stride, offset, d))
            scratch[0] = norm
            b = nat_bits(scratch_bits[0], u)
            if b == np.uint32(0xFFFFFFFF):
                b = np.uint32(0x7F800000)
            scratch_bits[0] = b
            wire = np.float64(scratch[0])
        if keep:
            norms[r] = wire
        if norm == 0.0:
            for i in range(d):
                dst[r, i] = 0.0
                if keep:
                    levels[r, i] = s
                    signs[r, i] = 0
            continue
        start = _counter(base, r, stride, offset, 0)
        for i in range(d):
            down = uniform_at(key, start + np.uint64(i)) * width[i] < gap[i]
            dst[r, i] = wire * (lower[i] if down else upper[i])
            if keep:
                levels[r, i] = bracket[i] + down
                signs[r, i] = 1 if xr[i] < 0.0 else 0


@numba.njit(cache=True)
def reconstruct_dither(levels, signs, wire_norm, geometric, s, out):
    for i in range(levels.shape[0]):
        out[i] = np.float64(wire_norm) * level_value(geometric, s, levels[i])
        if signs[i]:
            out[i] = -out[i]


@numba.njit(cache=True)
def accumulate_moments(rows, total, total_sq):
    n, d = rows.shape
    for r in range(n):
        for i in range(d):
            v = np.float64(rows[r, i])
            total[i] += v
            total_sq[i] += v * v


@numba.njit(cache=True)
def relative_sq_error(rows, x):
    """Per-row ||row - x||^2 / ||x||^2 in float64."""
    n, d = rows.shape
    nx = 0.0
    for i in range(d):
        nx += np.float64(x[i]) * np.float64(x[i])
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        acc = 0.0
        for i in range(d):
            diff = np.float64(rows[r, i]) - np.float64(x[i])
            acc += diff * diff
        out[r] = acc / nx
    return out
