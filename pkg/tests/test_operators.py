import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from natcomp import operators as op
from natcomp.errors import ConfigurationError, InvalidInputError
from natcomp.rng import RngStream
from natcomp.variance import empirical_omega, unbiasedness_gate

finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
normal32 = finite32.filter(lambda t: t == 0 or abs(t) >= 2.0 ** -126)


def frequencies(t, spec, n=200_000, seed=0):
    out = op.compress_batch([t], spec, RngStream(seed), n)[:, 0]
    vals, counts = np.unique(out, return_counts=True)
    return dict(zip(vals.tolist(), (counts / n).tolist()))


def close_to(freq, p, n=200_000):
    return abs(freq - p) <= 4 * math.sqrt(p * (1 - p) / n) + 1e-12


@pytest.mark.parametrize("t, low, high, p_low", [
    (2.5, 2.0, 4.0, 0.75),
    (-2.75, -2.0, -4.0, 0.625),
    (0.75, 0.5, 1.0, 0.5),
])
def test_nat_two_point_law(t, low, high, p_low):
    assert op.nat_endpoints(t) == (low, high)
    assert op.nat_low_probability(t) == p_low
    f = frequencies(t, op.nat())
    assert set(f) == {low, high}
    assert close_to(f[low], p_low)


@pytest.mark.parametrize("t", [0.0, 1.0, 2.0 ** -126, 2.0 ** 127, -0.25, 1024.0])
def test_nat_fixed_points(t):
    for seed in range(5):
        assert op.c_nat_scalar(t, RngStream(seed)) == t


def exact_nat_law(t):
    """Exact (low, high, p_low) with rationals, from the definition via log2."""
    a = abs(Fraction(t))
    k = math.floor(math.log2(a))
    low = Fraction(2) ** k
    if low > a:
        low /= 2
    elif 2 * low <= a:
        low *= 2
    high = 2 * low if a != low else low
    p = (high - a) / low if a != low else Fraction(1)
    return low, high, p


@given(normal32.filter(lambda t: t != 0))
def test_nat_probability_matches_rational_oracle(t):
    low, high, p = exact_nat_law(t)
    assert op.nat_low_probability(t) == float(p)
    lo, hi = op.nat_endpoints(t)
    assert abs(lo) == float(low) and abs(hi) == float(high)
    assert p * low + (1 - p) * high == abs(Fraction(t))


@given(normal32.filter(lambda t: t != 0))
def test_nat_second_moment_at_most_nine_eighths(t):
    low, high, p = exact_nat_law(t)
    second = p * low ** 2 + (1 - p) * high ** 2
    assert second <= Fraction(9, 8) * Fraction(t) ** 2


@given(normal32.filter(lambda t: t != 0))
def test_binary64_expectation_within_two_ulp(t):
    lo, hi = op.nat_endpoints(t)
    p = op.nat_low_probability(t)
    e = p * lo + (1 - p) * hi
    assert abs(e - t) <= 2 * math.ulp(t)


@given(normal32.filter(lambda t: abs(t) <= 2.0 ** 127))
def test_nat_output_is_power_of_two_or_zero(t):
    y = op.c_nat_scalar(t, RngStream(3))
    assert y == 0 or abs(math.frexp(y)[0]) == 0.5
    assert np.sign(y) == np.sign(t) or y == 0


@given(normal32.filter(lambda t: abs(t) <= 2.0 ** 127))
def test_nat_idempotent_on_its_range(t):
    y = op.compress([t], op.nat(), RngStream(1))
    assert np.array_equal(op.compress(y, op.nat(), RngStream(99)), y)


def test_subnormals_flush_to_zero():
    assert op.c_nat_scalar(1e-40, RngStream(0)) == 0.0
    assert op.c_nat_scalar(-2.0 ** -127, RngStream(0)) == 0.0


def test_nat_overflow_is_an_input_error():
    with pytest.raises(InvalidInputError):
        op.compress_batch([3.0e38], op.nat(), RngStream(0), 64)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(InvalidInputError):
        op.c_nat_scalar(bad, RngStream(0))
    with pytest.raises(InvalidInputError):
        op.c_int_scalar(bad, RngStream(0))
    with pytest.raises(InvalidInputError):
        op.dense_vector([1.0, bad])


def test_float64_overflowing_binary32_rejected():
    with pytest.raises(InvalidInputError):
        op.dense_vector([1e39])


def test_int_round_law():
    f = frequencies(0.5, op.int_round())
    assert set(f) == {0.0, 1.0} and close_to(f[0.0], 0.5)
    assert op.c_int_scalar(3.0, RngStream(0)) == 3.0
    f = frequencies(-1.25, op.int_round())
    assert set(f) == {-2.0, -1.0} and close_to(f[-1.0], 0.75)


@given(st.fractions(min_value=Fraction(1, 10 ** 6), max_value=Fraction(999_999, 10 ** 6)))
def test_int_round_second_moment_ratio_is_one_over_x(x):
    # E[c(x)^2] = x * 1 for x in (0, 1); ratio x / x^2
    second = (1 - x) * 0 + x * 1
    assert second / x ** 2 == 1 / x


def test_identity_and_powers_of_two():
    x = np.array([0.3, -1.7, 5.0], dtype=np.float32)
    assert np.array_equal(op.compress(x, op.identity(), RngStream(0)), x)
    p2 = [1.0, 2.0, 4.0, 8.0]
    assert op.compress(p2, op.nat(), RngStream(5)).tolist() == p2


def test_sparsify_masks_exact_and_uniform():
    x = np.array([1, 2, 3, 4], dtype=np.float32)
    masks = list(itertools.combinations(range(4), 2))
    mean = np.zeros(4)
    for m in masks:
        xi = np.zeros(4)
        xi[list(m)] = 1
        mean += 2 * xi * x / len(masks)
    assert np.array_equal(mean, x)
    second = np.mean([np.sum((2 * x * np.isin(range(4), m)) ** 2) for m in masks])
    assert second / np.sum(x ** 2) == 2.0

    n = 60_000
    out = op.compress_batch(x, op.sparsify_spec(2), RngStream(2), n)
    nz = out != 0
    assert np.all(nz.sum(axis=1) == 2)
    assert np.all((out == 0) | (out == 2 * x))
    keys, counts = np.unique(nz, axis=0, return_counts=True)
    assert len(keys) == 6
    p = 1 / 6
    assert np.all(np.abs(counts / n - p) <= 4 * math.sqrt(p * (1 - p) / n))


def test_sparsify_edge_cases():
    x = np.array([1.5, -2.0, 3.0], dtype=np.float32)
    assert np.array_equal(op.sparsify(x, 3, RngStream(0)), x)
    f = op.compress_batch([1.0, 0.0], op.sparsify_spec(1), RngStream(0), 100_000)
    assert set(map(tuple, f.tolist())) == {(2.0, 0.0), (0.0, 0.0)}
    assert close_to(np.mean(f[:, 0] == 2.0), 0.5, 100_000)
    with pytest.raises(ConfigurationError):
        op.sparsify(x, 4, RngStream(0))
    with pytest.raises(ConfigurationError):
        op.sparsify_spec(0)


@given(st.integers(1, 40), st.integers(0, 2 ** 32), st.sampled_from([
    "nat", "int", "sparsify:q=1", "stddither:p=2,s=3", "natdither:p=inf,s=4,natnorm",
    "compose(nat;sparsify:q=1)", "natdither:p=1,s=2",
]))
def test_batch_rows_equal_sequential_calls(d, seed, text):
    spec = op.parse_spec(text)
    x = np.random.default_rng(seed).standard_normal(d).astype(np.float32)
    batch = op.compress_batch(x, spec, RngStream(seed, 1), 3)
    r = RngStream(seed, 1)
    seq = [op.compress(x, spec, r) for _ in range(3)]
    assert np.array_equal(batch, np.array(seq))
    assert r.position == 3 * op.draws_per_call(spec, d)


@pytest.mark.parametrize("text", [
    "identity", "nat", "int", "sparsify:q=5", "stddither:p=1,s=8", "stddither:p=inf,s=3",
    "natdither:p=2,s=8", "natdither:p=2,s=8,natnorm", "compose(nat;sparsify:q=10)",
    "compose(natdither:p=2,s=4;compose(nat;sparsify:q=3))",
])
def test_spec_grammar_round_trip(text):
    spec = op.parse_spec(text)
    assert op.format_spec(spec) == text
    assert op.parse_spec(op.format_spec(spec)) == spec


@pytest.mark.parametrize("text", [
    "", "nats", "sparsify:q=0", "sparsify", "stddither:p=3,s=2", "natdither:p=2,s=0",
    "stddither:p=2,s=4,natnorm", "compose()", "compose(nat;)", "nat:q=1",
])
def test_bad_specs_rejected(text):
    with pytest.raises(ConfigurationError):
        op.parse_spec(text)


def test_compose_applies_right_to_left():
    # sparsify first, then nat on the survivors: every output is a power of two or zero
    spec = op.parse_spec("compose(nat;sparsify:q=3)")
    y = op.compress(np.linspace(0.1, 1.0, 10), spec, RngStream(4))
    assert np.count_nonzero(y) == 3
    nz = y[y != 0].astype(np.float64)
    assert np.all(np.frexp(nz)[0] == 0.5)


def test_composition_omega_empirical_below_product_rule():
    from natcomp.bounds import omega_of
    spec = op.parse_spec("compose(nat;sparsify:q=100)")
    rep = empirical_omega(spec, 1000, 100, rng=RngStream(11))
    w = omega_of(spec, 1000).value
    assert w == pytest.approx(0.125 * 9 + 0.125 + 9)
    assert rep.median <= w


@pytest.mark.parametrize("text", ["nat", "int", "stddither:p=2,s=4", "natdither:p=inf,s=3",
                                  "sparsify:q=3", "compose(nat;sparsify:q=4)"])
def test_unbiased_small(text):
    x = np.random.default_rng(0).standard_normal(8)
    g = unbiasedness_gate(op.parse_spec(text), x, 100_000, RngStream(5))
    assert g.passed, g.max_z


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=30))
def test_dense_vector_keeps_binary32_values(values):
    v = op.dense_vector(values)
    assert v.dtype == np.float32
    assert np.array_equal(v, np.array(values, dtype=np.float32))


def test_dense_vector_rejects_bad_shapes():
    for bad in ([], [[1.0, 2.0]], ["a"]):
        with pytest.raises(InvalidInputError):
            op.dense_vector(bad)


@pytest.mark.parametrize("text", ["identity", "nat", "int", "sparsify:q=3", "natdither:p=2,s=4",
                                  "compose(nat;sparsify:q=3)"])
def test_batch_output_is_fresh_and_writable(text):
    x = np.array([1.5, -2.25, 0.3, 4.0, -0.7], dtype=np.float32)
    out = op.compress_batch(x, op.parse_spec(text), RngStream(0), 3)
    assert out.flags.writeable and out.flags.c_contiguous and out.shape == (3, 5)
    out[:] = 0
    assert x[0] == np.float32(1.5)
