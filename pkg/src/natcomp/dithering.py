"""General, standard and natural dithering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .codec import encode_dither
from .errors import ConfigurationError
from .operators import NormMode, P_NORMS, _p_code, dense_vector
from .rng import RngStream


@dataclass(frozen=True)
class LevelLadder:
    """Descending levels ``l_0 = 1 > ... > l_{s-1} > l_s = 0``.

    ``linear`` gives ``l_u = (s-u)/s``; ``geometric`` gives ``l_u = 2^-u``.
    """

    kind: str
    s: int

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "geometric"):
            raise ConfigurationError(f"unknown ladder kind {self.kind!r}")
        if int(self.s) != self.s or self.s < 1:
            raise ConfigurationError("ladder needs s >= 1")

    @classmethod
    def standard(cls, s: int) -> "LevelLadder":
        return cls("linear", s)

    @classmethod
    def natural(cls, s: int) -> "LevelLadder":
        return cls("geometric", s)

    @property
    def geometric(self) -> bool:
        return self.kind == "geometric"

    @property
    def levels(self) -> np.ndarray:
        return np.array([K.level_value(self.geometric, self.s, u) for u in range(self.s + 1)])


@dataclass
class DitherResult:
    norm_value: float
    signs: np.ndarray          # int8, +1 / -1
    level_indices: np.ndarray  # int32, s means the zero level
    reconstructed: np.ndarray  # binary32
    ladder: LevelLadder
    p_norm: float
    norm_mode: NormMode

    def encode(self) -> bytes:
        return encode_dither(self.signs, self.level_indices, self.norm_value,
                             p_norm=self.p_norm, s_levels=self.ladder.s,
                             geometric=self.ladder.geometric, norm_mode=self.norm_mode)


def _check_p(p) -> float:
    p = float("inf") if p in ("inf", np.inf) else p
    if p not in P_NORMS:
        raise ConfigurationError(f"norm must be 1, 2 or inf, got {p!r}")
    return float(p)


def _dither_block(rows, ladder, p, norm_mode, rng, keep=True):
    n, d = rows.shape
    out = np.empty_like(rows)
    levels = np.empty((n if keep else 0, d), dtype=np.int32)
    signs = np.empty((n if keep else 0, d), dtype=np.uint8)
    norms = np.empty(n if keep else 0, dtype=np.float32)
    stride = d + 1
    base = rng.take(stride * n)
    K.dither_rows(rows, out, ladder.geometric, ladder.s, _p_code(p), norm_mode is NormMode.NAT,
                  rng.ukey, base, stride, 0, levels, signs, norms)
    return out, levels, signs, norms


def dither(x, ladder: LevelLadder, p, norm_mode: NormMode | str, rng: RngStream) -> DitherResult:
    """Dither ``x`` against ``ladder`` with respect to the ``p``-norm.

    Each ``|x_i| / ||x||_p`` is rounded to one of its two bracketing ladder
    levels with probabilities that keep the result unbiased.  With
    ``norm_mode='nat-compressed'`` the transmitted norm is itself naturally
    compressed.  A zero vector yields zero norm and all indices at the zero level.
    """
    p = _check_p(p)
    norm_mode = NormMode(norm_mode)
    x = dense_vector(x)
    out, levels, signs, norms = _dither_block(x[None, :].copy(), ladder, p, norm_mode, rng)
    return DitherResult(
        norm_value=float(norms[0]),
        signs=np.where(signs[0] == 1, -1, 1).astype(np.int8),
        level_indices=levels[0],
        reconstructed=out[0],
        ladder=ladder,
        p_norm=p,
        norm_mode=norm_mode,
    )


def _norm_root(d: int, p: float) -> float:
    r = min(p, 2.0)
    return d ** (1.0 / r)


def omega_nat_dither(d: int, p, s: int, norm_mode: NormMode | str = NormMode.EXACT) -> float:
    """Second-moment parameter of natural dithering.

    ``1/8 + d^(1/r) 2^(1-s) min(1, d^(1/r) 2^(1-s))`` with ``r = min(p, 2)``;
    a naturally compressed norm multiplies the second moment by a further 9/8.
    """
    p = _check_p(p)
    if d < 1 or s < 1:
        raise ConfigurationError("need d >= 1 and s >= 1")
    t = _norm_root(d, p) * 2.0 ** (1 - s)
    second = 9 / 8 + t * min(1.0, t)
    if NormMode(norm_mode) is NormMode.NAT:
        second *= 9 / 8
    return second - 1.0


def omega_std_dither(d: int, p, s: int) -> float:
    """Second-moment parameter of standard dithering with ``s`` linear levels.

    ``d^(1/r)/s * min(1, d^(1/r)/s)``; substituting ``s = 2^(s'-1)`` gives the
    iteration factor listed for standard dithering in the speedup tables.
    """
    p = _check_p(p)
    if d < 1 or s < 1:
        raise ConfigurationError("need d >= 1 and s >= 1")
    t = _norm_root(d, p) / s
    return t * min(1.0, t)


@dataclass
class EquivalenceReport:
    levels: np.ndarray
    natural_freq: np.ndarray  # rows: coordinates, columns: levels
    composed_freq: np.ndarray
    max_z: float
    draws: int

    @property
    def passed(self) -> bool:
        return self.max_z <= 4.0


def _level_values(ladder, levels):
    table = ladder.levels.astype(np.float32)
    return table[levels]


def std_vs_nat_equivalence_check(x, s: int, p, rng: RngStream, draws: int = 100_000,
                                 chunk: int = 20_000) -> EquivalenceReport:
    """Compare natural dithering with ``C_nat`` applied to standard dithering on ``2^(s-1)`` levels.

    For each coordinate the empirical frequencies of the (unsigned) level
    values from both routes are compared with a two-sample proportion z-test.
    """
    p = _check_p(p)
    x = dense_vector(x)
    d = x.size
    nat_ladder = LevelLadder.natural(s)
    std_ladder = LevelLadder.standard(2 ** (s - 1))
    values = nat_ladder.levels.astype(np.float32)[::-1]  # ascending: 0, 2^(1-s), ..., 1
    counts_nat = np.zeros((d, values.size), dtype=np.int64)
    counts_cmp = np.zeros((d, values.size), dtype=np.int64)
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        rows = np.broadcast_to(x, (n, d)).copy()
        _, lv_nat, _, _ = _dither_block(rows, nat_ladder, p, NormMode.EXACT, rng)
        _, lv_std, _, _ = _dither_block(rows, std_ladder, p, NormMode.EXACT, rng)
        xi_std = _level_values(std_ladder, lv_std)
        rounded = np.empty_like(xi_std)
        base = rng.take(xi_std.size)
        K.nat_rows(xi_std.view(np.uint32), rounded.view(np.uint32), rng.ukey, base, d, 0)
        xi_nat = _level_values(nat_ladder, lv_nat)
        pos_nat = np.searchsorted(values, xi_nat)
        pos_cmp = np.searchsorted(values, rounded)
        if np.any(values[np.minimum(pos_cmp, values.size - 1)] != rounded):
            raise AssertionError("composed route produced a value outside the natural ladder")
        for i in range(d):
            counts_nat[i] += np.bincount(pos_nat[:, i], minlength=values.size)
            counts_cmp[i] += np.bincount(pos_cmp[:, i], minlength=values.size)
        done += n
    f_nat = counts_nat / draws
    f_cmp = counts_cmp / draws
    pooled = (counts_nat + counts_cmp) / (2 * draws)
    se = np.sqrt(pooled * (1 - pooled) * 2 / draws)
    diff = np.abs(f_nat - f_cmp)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff > 0, np.inf, 0.0))
    return EquivalenceReport(values, f_nat, f_cmp, float(z.max()), draws)


def exact_level_distribution(y: float, ladder: LevelLadder) -> dict[float, float]:
    """Exact two-point law of the rounded level for a normalised magnitude ``y``."""
    hi, p_low = K.bracket(ladder.geometric, ladder.s, float(y))
    top = K.level_value(ladder.geometric, ladder.s, hi)
    bottom = K.level_value(ladder.geometric, ladder.s, hi + 1)
    law: dict[float, float] = {}
    for value, prob in ((bottom, p_low), (top, 1.0 - p_low)):
        if prob > 0:
            law[value] = law.get(value, 0.0) + prob
    return law


def second_moment_ratio_gap(d: int, p, s: int) -> float:
    """Ratio of the standard-dithering bound on ``s`` levels to the natural one.

    Grows like ``2^(s-1)/s`` until both bounds saturate.
    """
    return (1 + omega_std_dither(d, p, s)) / (1 + omega_nat_dither(d, p, s))


__all__ = [
    "LevelLadder", "DitherResult", "dither", "omega_nat_dither", "omega_std_dither",
    "std_vs_nat_equivalence_check", "EquivalenceReport", "exact_level_distribution",
    "second_moment_ratio_gap",
]
