import math
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from natcomp import codec
from natcomp.errors import EncodeError, FormatError, InvalidInputError
from natcomp.operators import NormMode

H = codec.HEADER.size


def payload_bitstring(block, nbits):
    body = block[H:]
    return "".join(f"{b:08b}" for b in body)[:nbits]


def test_split_examples():
    f = codec.split_binary32(-2.75)
    assert (f.sign, f.exponent, f.fraction) == (1, 128, 0.375)
    assert f.mantissa_bit(2) == f.mantissa_bit(3) == 1
    assert sum(f.mantissa_bit(j) for j in range(1, 24)) == 2
    f = codec.split_binary32(1.0)
    assert (f.sign, f.exponent, f.mantissa) == (0, 127, 0)
    f = codec.split_binary32(0.75)
    assert (f.sign, f.exponent, f.fraction) == (0, 126, 0.5)


@given(st.integers(0, 1), st.integers(1, 254), st.integers(0, 2 ** 23 - 1))
def test_split_reconstructs_normal_values(sign, exp, mant):
    bits = (sign << 31) | (exp << 23) | mant
    t = float(np.uint32(bits).view(np.float32))
    f = codec.split_binary32(t)
    assert f.to_bits() == bits
    assert f.value() == t


@pytest.mark.parametrize("bad", [math.nan, math.inf, 1e39])
def test_split_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        codec.split_binary32(bad)


def all_nat9_values():
    ks = np.arange(-126, 128)
    pos = np.ldexp(np.float32(1), ks).astype(np.float32)
    return np.concatenate([[np.float32(0)], pos, -pos]).astype(np.float32)


def test_nat9_exhaustive_round_trip():
    values = all_nat9_values()
    assert values.size == 2 * 254 + 1
    block = codec.encode_nat9(values)
    assert len(block) - H == math.ceil(9 * values.size / 8)
    out = codec.decode(block)
    assert out.codec == codec.NAT9
    assert np.array_equal(out.values.view(np.uint32), values.view(np.uint32))
    for v in values:  # one scalar at a time, too
        assert codec.decode(codec.encode_nat9([v])).values[0] == v


def test_nat9_bit_patterns():
    assert payload_bitstring(codec.encode_nat9([-2.0]), 9) == "110000000"
    assert payload_bitstring(codec.encode_nat9([0.0]), 9) == "000000000"
    assert payload_bitstring(codec.encode_nat9([-0.0]), 9) == "000000000"
    # 0 01111111 padded to two bytes
    raw = codec.HEADER.pack(codec.MAGIC, 1, codec.NAT9, 1) + bytes([0b00111111, 0b10000000])
    assert codec.decode(raw).values.tolist() == [1.0]


def test_nat9_size_law_and_ratio():
    d = 10 ** 6
    block = codec.encode_nat9(np.ones(d, dtype=np.float32))
    assert len(block) - H == 1_125_000
    ratio = 4 * d / (len(block) - H)
    assert round(ratio, 2) == 3.56
    assert ratio == 32 / 9


@pytest.mark.parametrize("bad", [[3.0], [1.5], [2.0 ** -130]])
def test_nat9_rejects_non_powers(bad):
    with pytest.raises(EncodeError):
        codec.encode_nat9(bad)


def test_nat9_rejects_reserved_exponent_on_decode():
    raw = codec.HEADER.pack(codec.MAGIC, 1, codec.NAT9, 1) + bytes([0b01111111, 0b10000000])
    with pytest.raises(FormatError):
        codec.decode(raw)


def test_nat8c_offsets_and_clipping():
    codes, clipped = codec.nat8c_codes([1.0, 2.0 ** -50, 2.0 ** 10, -4.0, 0.0])
    assert [c & 0x3F for c in codes[:4]] == [50, 0, 60, 52]
    assert codes[3] & 0x40 and not codes[0] & 0x40
    assert codes[4] == codec.NAT8C_ZERO
    assert clipped == 0
    codes, clipped = codec.nat8c_codes([2.0 ** 20, 2.0 ** -60, 1.0])
    assert clipped == 2
    assert codec.nat8c_values(codes).tolist() == [2.0 ** 10, 2.0 ** -50, 1.0]


@given(st.lists(st.integers(-126, 127), min_size=1, max_size=50), st.data())
def test_nat8c_clip_counter_and_range(ks, data):
    signs = data.draw(st.lists(st.booleans(), min_size=len(ks), max_size=len(ks)))
    x = np.array([(-1.0 if s else 1.0) * 2.0 ** k for k, s in zip(ks, signs)], dtype=np.float32)
    codes, clipped = codec.nat8c_codes(x)
    assert clipped == sum(1 for k in ks if k < -50 or k > 10)
    assert np.all((codes & 0x3F) <= 60)
    back = codec.nat8c_values(codes)
    want = np.sign(x) * np.ldexp(1.0, np.clip(ks, -50, 10))
    assert np.array_equal(back, want.astype(np.float32))
    block, c2 = codec.encode_nat8c(x)
    assert c2 == clipped and len(block) - H == x.size
    assert np.array_equal(codec.decode(block).values, back)


def test_nat8c_rejects_malformed_codes():
    with pytest.raises(FormatError):
        codec.nat8c_values(np.array([61], dtype=np.uint8))
    with pytest.raises(FormatError):
        codec.nat8c_values(np.array([0x81], dtype=np.uint8))


@pytest.mark.parametrize("s, bits", [(1, 1), (2, 2), (3, 2), (7, 3), (8, 4), (15, 4), (16, 5), (255, 8)])
def test_level_bits(s, bits):
    assert codec.level_bits(s) == bits == math.ceil(math.log2(s + 1))


def test_dither_payload_size():
    assert codec.dither_payload_bits(10 ** 6, 8) == 32 + 10 ** 6 * 5
    assert codec.dither_payload_bits(10, 8, NormMode.NAT) == 16 + 50


@given(st.integers(1, 20), st.integers(1, 60), st.data())
def test_dither_round_trip(s, d, data):
    levels = np.array(data.draw(st.lists(st.integers(0, s), min_size=d, max_size=d)))
    signs = np.array(data.draw(st.lists(st.sampled_from([-1, 1]), min_size=d, max_size=d)))
    geometric = data.draw(st.booleans())
    mode = data.draw(st.sampled_from([NormMode.EXACT, NormMode.NAT]))
    norm = 4.0 if mode is NormMode.NAT else 3.14159
    block = codec.encode_dither(signs, levels, norm, p_norm=2.0, s_levels=s, geometric=geometric,
                                norm_mode=mode)
    header_bits = 8 * (H + 4)
    assert 8 * len(block) - header_bits == 8 * codec.payload_bytes(codec.dither_payload_bits(d, s, mode))
    out = codec.decode(block)
    assert np.array_equal(out.levels, levels)
    assert np.array_equal(np.where(out.signs == 1, -1, 1), signs)
    assert out.dither.s_levels == s and out.dither.geometric == geometric
    assert out.dither.norm == np.float32(norm)
    if geometric:
        lv = np.where(levels < s, 2.0 ** -levels.astype(float), 0.0)
    else:
        lv = (s - levels) / s
    want = (np.float32(norm) * signs * lv.astype(np.float32)).astype(np.float32)
    np.testing.assert_allclose(out.values, want, rtol=1e-6)


def test_dither_rejects_bad_index():
    with pytest.raises(EncodeError):
        codec.encode_dither([1], [9], 1.0, p_norm=2.0, s_levels=8, geometric=True)


def test_decode_framing_errors():
    good = codec.encode_nat9([1.0, -0.5, 0.0, 4.0])
    assert codec.decode(good).values.tolist() == [1.0, -0.5, 0.0, 4.0]
    with pytest.raises(FormatError):
        codec.decode(good[:-1])
    with pytest.raises(FormatError):
        codec.decode(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        codec.decode(good[:4] + bytes([2]) + good[5:])
    with pytest.raises(FormatError):
        codec.decode(good[:5] + bytes([9]) + good[6:])
    with pytest.raises(FormatError):
        codec.decode(good[:6])
    with pytest.raises(FormatError):
        codec.decode(good + b"\x00")


def test_exponent_histogram_examples():
    h = codec.exponent_histogram([1, 2, 2, 0])
    assert h.counts == {0: 1, 1: 2} and h.zeros == 1
    assert (h.min_exponent, h.max_exponent) == (0, 1)
    h = codec.exponent_histogram(np.zeros(7))
    assert h.counts == {} and h.zeros == 7 and h.min_exponent is None


def test_exponent_histogram_gaussian_matches_scalar_oracle():
    x = np.random.default_rng(3).standard_normal(10 ** 5).astype(np.float32)
    h = codec.exponent_histogram(x)
    want = Counter(math.floor(math.log2(abs(float(v)))) for v in x if v != 0)
    assert h.counts == dict(want)
    assert -20 <= h.min_exponent and h.max_exponent <= 2
    mass = sum(c for k, c in h.counts.items() if -10 <= k <= 2)
    assert mass / x.size > 0.99


def test_header_layout():
    block = codec.encode_nat9([1.0])
    magic, version, cid, d = struct.unpack_from("<4sBBQ", block)
    assert (magic, version, cid, d) == (b"NCMP", 1, 1, 1)
