"""Unbiased compression operators.

Every operator maps a binary32 vector to a random binary32 vector whose
expectation is the input.  Randomness comes from an explicit
:class:`~natcomp.rng.RngStream`; each operator consumes a fixed number of
counters per call (see :func:`draws_per_call`) so that a batch of ``k`` rows
is bit-identical to ``k`` sequential single-vector calls.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, InvalidInputError
from .rng import RngStream

SMALLEST_NORMAL = 2.0 ** -126


class Variant(str, enum.Enum):
    IDENTITY = "identity"
    NAT = "nat"
    INT_ROUND = "int"
    STD_DITHER = "stddither"
    NAT_DITHER = "natdither"
    SPARSIFY = "sparsify"
    COMPOSE = "compose"


class NormMode(str, enum.Enum):
    EXACT = "exact"
    NAT = "nat-compressed"


P_NORMS = (1, 2, float("inf"))


@dataclass(frozen=True)
class CompressorSpec:
    """Tagged description of one operator or a composition chain.

    ``chain`` is applied right to left: ``compose(A, B)`` computes ``A(B(x))``.
    """

    variant: Variant
    p_norm: float | None = None
    s_levels: int | None = None
    q_coords: int | None = None
    norm_mode: NormMode = NormMode.EXACT
    chain: tuple["CompressorSpec", ...] = field(default=())

    def __post_init__(self) -> None:
        v = self.variant
        if v in (Variant.STD_DITHER, Variant.NAT_DITHER):
            if self.p_norm not in P_NORMS:
                raise ConfigurationError(f"dithering norm must be one of 1, 2, inf, got {self.p_norm!r}")
            if self.s_levels is None or int(self.s_levels) != self.s_levels or self.s_levels < 1:
                raise ConfigurationError(f"s_levels must be a positive integer, got {self.s_levels!r}")
            if v is Variant.STD_DITHER and self.norm_mode is not NormMode.EXACT:
                raise ConfigurationError("standard dithering sends the exact norm")
        if v is Variant.SPARSIFY:
            if self.q_coords is None or int(self.q_coords) != self.q_coords or self.q_coords < 1:
                raise ConfigurationError(f"q_coords must be a positive integer, got {self.q_coords!r}")
        if v is Variant.COMPOSE and not self.chain:
            raise ConfigurationError("compose needs a non-empty chain")

    def __str__(self) -> str:
        return format_spec(self)


def identity() -> CompressorSpec:
    return CompressorSpec(Variant.IDENTITY)


def nat() -> CompressorSpec:
    return CompressorSpec(Variant.NAT)


def int_round() -> CompressorSpec:
    return CompressorSpec(Variant.INT_ROUND)


def std_dither(p: float, s: int) -> CompressorSpec:
    return CompressorSpec(Variant.STD_DITHER, p_norm=_norm_value(p), s_levels=s)


def nat_dither(p: float, s: int, norm_mode: NormMode | str = NormMode.EXACT) -> CompressorSpec:
    return CompressorSpec(Variant.NAT_DITHER, p_norm=_norm_value(p), s_levels=s,
                          norm_mode=NormMode(norm_mode))


def sparsify_spec(q: int) -> CompressorSpec:
    return CompressorSpec(Variant.SPARSIFY, q_coords=q)


def compose(*chain: CompressorSpec) -> CompressorSpec:
    return CompressorSpec(Variant.COMPOSE, chain=tuple(chain))


def _norm_value(p) -> float:
    if p in ("inf", "∞", np.inf):
        return float("inf")
    try:
        return float(p)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad norm selector {p!r}") from None


def _p_code(p: float) -> int:
    return K.P_INF if p == float("inf") else int(p)


# ---------------------------------------------------------------------------
# spec strings

def format_spec(spec: CompressorSpec) -> str:
    v = spec.variant
    if v in (Variant.IDENTITY, Variant.NAT, Variant.INT_ROUND):
        return v.value
    if v is Variant.SPARSIFY:
        return f"sparsify:q={spec.q_coords}"
    if v in (Variant.STD_DITHER, Variant.NAT_DITHER):
        p = "inf" if spec.p_norm == float("inf") else str(int(spec.p_norm))
        tail = ",natnorm" if spec.norm_mode is NormMode.NAT else ""
        return f"{v.value}:p={p},s={spec.s_levels}{tail}"
    return "compose(" + ";".join(format_spec(c) for c in spec.chain) + ")"


_ATOM = re.compile(r"^(?P<name>[a-z]+)(?::(?P<args>.*))?$")


def parse_spec(text: str) -> CompressorSpec:
    """Parse the compact grammar used by the CLI and config files.

    ``nat | int | identity | sparsify:q=<int> | stddither:p=<1|2|inf>,s=<int>
    | natdither:p=..,s=..[,natnorm] | compose(<spec>;<spec>...)``
    """
    text = text.strip()
    if text.startswith("compose(") and text.endswith(")"):
        inner = text[len("compose("):-1]
        parts, depth, cur = [], 0, []
        for ch in inner:
            if ch == ";" and depth == 0:
                parts.append("".join(cur))
                cur = []
                continue
            depth += ch == "("
            depth -= ch == ")"
            cur.append(ch)
        parts.append("".join(cur))
        if any(not p.strip() for p in parts):
            raise ConfigurationError(f"empty element in {text!r}")
        return compose(*(parse_spec(p) for p in parts))
    m = _ATOM.match(text)
    if not m:
        raise ConfigurationError(f"unknown spec {text!r}")
    name, args = m["name"], m["args"]
    kw: dict[str, str] = {}
    flags: set[str] = set()
    if args:
        for item in args.split(","):
            item = item.strip()
            if "=" in item:
                k, val = item.split("=", 1)
                kw[k.strip()] = val.strip()
            elif item:
                flags.add(item)
    try:
        if name in ("identity", "nat", "int") and not kw and not flags:
            return CompressorSpec(Variant(name))
        if name == "sparsify" and set(kw) == {"q"} and not flags:
            return sparsify_spec(int(kw["q"]))
        if name == "stddither" and set(kw) == {"p", "s"} and not flags:
            return std_dither(kw["p"], int(kw["s"]))
        if name == "natdither" and set(kw) == {"p", "s"} and flags <= {"natnorm"}:
            mode = NormMode.NAT if "natnorm" in flags else NormMode.EXACT
            return nat_dither(kw["p"], int(kw["s"]), mode)
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad parameter in {text!r}: {exc}") from None
    raise ConfigurationError(f"unknown spec {text!r}")


# ---------------------------------------------------------------------------
# vectors

def dense_vector(values) -> np.ndarray:
    """Validate and convert to a contiguous 1-D binary32 array.

    Rejects NaN/inf, including float64 values that overflow binary32.
    """
    arr = np.asarray(values)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError("expected a non-empty 1-D vector")
    if arr.dtype.kind not in "fiub":
        raise InvalidInputError(f"expected real values, got dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("vector contains NaN or infinity")
    with np.errstate(over="ignore"):
        out = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise InvalidInputError("vector contains values outside the binary32 range")
    return out


def draws_per_call(spec: CompressorSpec, d: int) -> int:
    """Number of random counters one compression of a length-``d`` vector uses."""
    v = spec.variant
    if v is Variant.IDENTITY:
        return 0
    if v in (Variant.NAT, Variant.INT_ROUND):
        return d
    if v in (Variant.STD_DITHER, Variant.NAT_DITHER):
        return d + 1
    if v is Variant.SPARSIFY:
        return spec.q_coords
    return sum(draws_per_call(c, d) for c in spec.chain)


def check_spec(spec: CompressorSpec, d: int) -> None:
    if spec.variant is Variant.SPARSIFY and not 1 <= spec.q_coords <= d:
        raise ConfigurationError(f"sparsify q={spec.q_coords} outside 1..{d}")
    if spec.variant in (Variant.STD_DITHER, Variant.NAT_DITHER) and spec.s_levels > 2 ** 24:
        raise ConfigurationError("s_levels too large")
    for c in spec.chain:
        check_spec(c, d)


def _apply(spec, rows, rng_key, base, stride, offset):
    """Apply ``spec`` to every row; returns (new_rows, counters_used)."""
    v = spec.variant
    d = rows.shape[1]
    if v is Variant.IDENTITY:
        return rows, 0
    out = np.empty(rows.shape, dtype=np.float32)
    if v is Variant.NAT:
        overflow = K.nat_rows(rows.view(np.uint32), out.view(np.uint32), rng_key, base, stride, offset)
        if overflow:
            raise InvalidInputError(f"{overflow} value(s) round up past the binary32 range")
        return out, d
    if v is Variant.INT_ROUND:
        K.int_rows(rows, out, rng_key, base, stride, offset)
        return out, d
    if v is Variant.SPARSIFY:
        K.sparsify_rows(rows, out, spec.q_coords, rng_key, base, stride, offset)
        return out, spec.q_coords
    if v in (Variant.STD_DITHER, Variant.NAT_DITHER):
        empty_i = np.empty((0, 0), dtype=np.int32)
        empty_s = np.empty((0, 0), dtype=np.uint8)
        empty_n = np.empty(0, dtype=np.float32)
        K.dither_rows(rows, out, v is Variant.NAT_DITHER, spec.s_levels, _p_code(spec.p_norm),
                      spec.norm_mode is NormMode.NAT, rng_key, base, stride, offset,
                      empty_i, empty_s, empty_n)
        if not np.all(np.isfinite(out)):
            raise InvalidInputError("compressed norm overflowed binary32")
        return out, d + 1
    used = 0
    for link in reversed(spec.chain):
        rows, n = _apply(link, rows, rng_key, base, stride, offset + used)
        used += n
    return rows, used


def compress_batch(x, spec: CompressorSpec, rng: RngStream, rows: int) -> np.ndarray:
    """``rows`` independent compressions of ``x``, one per output row.

    Row ``r`` equals the ``r``-th of ``rows`` sequential :func:`compress` calls.
    """
    x = dense_vector(x)
    d = x.size
    check_spec(spec, d)
    stride = draws_per_call(spec, d)
    base = rng.take(stride * rows)
    block = np.broadcast_to(x, (rows, d))  # stride-0 rows; kernels never write to it
    out, _ = _apply(spec, block, rng.ukey, base, stride, 0)
    return out.copy() if out is block else out


def compress(x, spec: CompressorSpec, rng: RngStream) -> np.ndarray:
    """Apply ``spec`` to ``x`` and return the decompressed binary32 result."""
    return compress_batch(x, spec, rng, 1)[0]


def sparsify(x, q: int, rng: RngStream) -> np.ndarray:
    """Random-``q`` sparsification: keep a uniform ``q``-subset scaled by ``d/q``."""
    x = dense_vector(x)
    if not 1 <= q <= x.size:
        raise ConfigurationError(f"q={q} outside 1..{x.size}")
    return compress(x, sparsify_spec(q), rng)


def _scalar(t) -> np.ndarray:
    if not np.isfinite(t):
        raise InvalidInputError(f"non-finite input {t!r}")
    return dense_vector([t])


def c_nat_scalar(t: float, rng: RngStream) -> float:
    """Round ``t`` to one of its two bracketing signed powers of two, unbiasedly.

    Subnormal inputs are flushed to zero first.
    """
    return float(compress(_scalar(t), nat(), rng)[0])


def c_int_scalar(t: float, rng: RngStream) -> float:
    """Unbiased rounding to one of the two nearest integers."""
    return float(compress(_scalar(t), int_round(), rng)[0])


def nat_low_probability(t: float) -> float:
    """P(low endpoint) for natural compression of binary32 ``t``, from its mantissa."""
    bits = int(np.float32(t).view(np.uint32))
    exp = (bits >> 23) & 0xFF
    if exp in (0, 255):
        return 1.0
    return 1.0 - (bits & 0x7FFFFF) / 2.0 ** 23


def nat_endpoints(t: float) -> tuple[float, float]:
    """Low and high candidate outputs of natural compression for binary32 ``t``."""
    bits = int(np.float32(t).view(np.uint32))
    exp = (bits >> 23) & 0xFF
    if exp == 0:
        return 0.0, 0.0
    sign = -1.0 if bits >> 31 else 1.0
    low = sign * 2.0 ** (exp - 127)
    if bits & 0x7FFFFF == 0:
        return low, low
    return low, 2.0 * low
