"""Monte-Carlo variance experiments and unbiasedness gates."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import InvalidInputError
from .operators import CompressorSpec, compress_batch, dense_vector, format_spec
from .rng import RngStream

Z_GATE = 4.0
MIN_GATE_DRAWS = 10_000

TRIAL_COLUMNS = ("trial", "omega")
SUMMARY_COLUMNS = ("spec", "d", "trials", "min", "q25", "median", "q75", "max")


@dataclass
class VarianceReport:
    spec: CompressorSpec
    d: int
    trials: int
    omega_samples: np.ndarray

    @property
    def quartiles(self) -> tuple[float, float, float, float, float]:
        q = np.quantile(self.omega_samples, [0.0, 0.25, 0.5, 0.75, 1.0])
        return tuple(float(v) for v in q)

    @property
    def median(self) -> float:
        return self.quartiles[2]

    def trial_rows(self) -> list[tuple[int, float]]:
        return [(i, float(w)) for i, w in enumerate(self.omega_samples)]

    def summary_row(self) -> tuple:
        return (format_spec(self.spec), self.d, self.trials, *self.quartiles)


def load_vector_file(path: str | Path) -> np.ndarray:
    """Read a vector file: one decimal per line, or raw little-endian binary32 for ``.f32``."""
    path = Path(path)
    if path.suffix == ".f32":
        raw = path.read_bytes()
        if len(raw) % 4:
            raise InvalidInputError(f"{path}: size {len(raw)} is not a multiple of 4")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise InvalidInputError(f"{path}: element {bad[0]} is not finite")
        if values.size == 0:
            raise InvalidInputError(f"{path}: empty vector")
        return values
    values = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                v = float(text)
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: not a number: {text!r}") from None
            if not math.isfinite(v):
                raise InvalidInputError(f"{path}:{lineno}: non-finite value {text!r}")
            values.append(v)
    if not values:
        raise InvalidInputError(f"{path}: empty vector")
    return dense_vector(values)


def gaussian_input(rng: RngStream, trial: int, d: int) -> np.ndarray:
    return rng.numpy_generator(trial).standard_normal(d).astype(np.float32)


def empirical_omega(spec: CompressorSpec, d: int, trials: int, input_law: str = "gaussian",
                    rng: RngStream | None = None, vector_file: str | Path | None = None) -> VarianceReport:
    """Per-trial normalised error ``||C(x) - x||^2 / ||x||^2``, one draw per trial.

    Trial ``i`` compresses with stream ``i`` of the seed.  Gaussian inputs are
    fresh standard-normal vectors per trial; the file law reuses the file's
    vector for every trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng or RngStream(0)
    if input_law == "file":
        if vector_file is None:
            raise InvalidInputError("file input law needs a vector file")
        fixed = load_vector_file(vector_file)
        d = fixed.size
    elif input_law == "gaussian":
        fixed = None
    else:
        raise ValueError(f"unknown input law {input_law!r}")
    samples = np.empty(trials)
    for t in range(trials):
        x = fixed if fixed is not None else gaussian_input(rng, t, d)
        if not np.any(x):
            raise InvalidInputError("omega is undefined for the zero vector")
        out = compress_batch(x, spec, rng.spawn(t), 1)
        samples[t] = K.relative_sq_error(out, x)[0]
    return VarianceReport(spec, d, trials, samples)


@dataclass
class GateResult:
    passed: bool
    max_z: float
    mean: np.ndarray
    draws: int


def unbiasedness_gate(spec: CompressorSpec, x, draws: int, rng: RngStream,
                      chunk: int | None = None) -> GateResult:
    """Pass iff every coordinate's empirical mean is within 4 standard errors of ``x``."""
    if draws < MIN_GATE_DRAWS:
        raise ValueError(f"gate needs at least {MIN_GATE_DRAWS} draws")
    x = dense_vector(x)
    d = x.size
    chunk = chunk or max(1, 100_000 // d)
    total = np.zeros(d)
    total_sq = np.zeros(d)
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        K.accumulate_moments(compress_batch(x, spec, rng, n), total, total_sq)
        done += n
    return _gate_from_moments(total, total_sq, draws, x.astype(np.float64))


def _gate_from_moments(total, total_sq, draws, target) -> GateResult:
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    se = np.sqrt(var / draws)
    diff = np.abs(mean - target)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff > 0, np.inf, 0.0))
    max_z = float(z.max())
    return GateResult(max_z <= Z_GATE, max_z, mean, draws)


def gate_samples(samples, target) -> GateResult:
    """Same 4-sigma gate over pre-drawn samples (rows are draws)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    return _gate_from_moments(samples.sum(0), (samples * samples).sum(0), samples.shape[0],
                              np.atleast_1d(np.asarray(target, dtype=np.float64)))


def nat_second_moment_ratio(t) -> np.ndarray:
    """Exact ``E[C_nat(t)^2] / t^2`` in binary64 from the two-point law."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    m, e = np.frexp(t)
    low = np.ldexp(0.5, e)  # t in [low, 2 low)
    high = 2.0 * low
    p_low = (high - t) / low
    return (p_low * low * low + (1.0 - p_low) * high * high) / (t * t)


def nat_second_moment_sup(lo_exp: int = -20, hi_exp: int = 20, points: int = 100_000):
    """Maximum exact ratio over a log grid plus the ``(4/3) 2^a`` points.

    Returns ``(max_ratio, argmax_t)``.
    """
    grid = np.logspace(lo_exp, hi_exp, points, base=2.0)
    special = (4.0 / 3.0) * np.ldexp(1.0, np.arange(lo_exp, hi_exp))
    t = np.concatenate([grid, special])
    ratio = nat_second_moment_ratio(t)
    k = int(np.argmax(ratio))
    return float(ratio[k]), float(t[k])


def int_second_moment_ratio(x: float) -> float:
    """Exact ``E[C_int(x)^2] / x^2``; equals ``1/x`` on (0, 1)."""
    lo = math.floor(x)
    if lo == x:
        return 1.0
    p_low = (lo + 1) - x
    return (p_low * lo * lo + (1 - p_low) * (lo + 1) ** 2) / (x * x)


def write_trials_csv(report: VarianceReport, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for trial, omega in report.trial_rows():
        w.writerow((trial, repr(omega)))


def write_summary_csv(reports, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for rep in reports:
        spec, d, trials, *q = rep.summary_row()
        w.writerow((spec, d, trials, *(repr(v) for v in q)))


def summary_text(reports) -> str:
    buf = io.StringIO()
    write_summary_csv(reports, buf)
    return buf.getvalue()
