"""Distributed SGD with compression on the workers and on the master broadcast."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ina
from .bounds import ProblemSpec, alpha_beta, gradient_bound, iteration_bound, omega_of
from .codec import dither_payload_bits, nat8c_codes, nat8c_values
from .errors import ConfigurationError, DivergenceError, InvalidInputError, ProtocolError
from .operators import CompressorSpec, Variant, compress, format_spec, identity, parse_spec
from .rng import RngStream

AGGREGATION_MODES = ("exact", "ina", "ina-socket")
DIVERGENCE_FACTOR = 1e6
TRACE_COLUMNS = ("k", "f", "grad_norm2", "bits_w2m", "bits_m2w")


@dataclass
class SyntheticProblem:
    """Per-worker objectives ``f_i``; ``f`` is their average.

    Quadratic: ``f_i(x) = x'A_i x / 2 - b_i'x``.  Logistic: mean logistic
    loss over the worker's samples plus ``reg/2 ||x||^2``.  Stochastic
    gradients add ``N(0, sigma_add^2 I)`` noise.
    """

    kind: str
    d: int
    n: int
    sigma_add: float = 0.0
    A: np.ndarray | None = None  # (n, d, d)
    b: np.ndarray | None = None  # (n, d)
    X: np.ndarray | None = None  # (n, m, d)
    y: np.ndarray | None = None  # (n, m), labels +-1
    reg: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("quadratic", "logistic"):
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        if self.n < 1 or self.d < 1:
            raise ConfigurationError("need n >= 1 and d >= 1")
        if self.sigma_add < 0:
            raise ConfigurationError("sigma_add must be nonnegative")
        if self.kind == "quadratic":
            if self.A is None or self.b is None or self.A.shape != (self.n, self.d, self.d) \
                    or self.b.shape != (self.n, self.d):
                raise ConfigurationError("quadratic problem needs A (n,d,d) and b (n,d)")
        elif self.X is None or self.y is None or self.X.shape[0] != self.n or self.X.shape[2] != self.d:
            raise ConfigurationError("logistic problem needs X (n,m,d) and y (n,m)")

    @property
    def identical(self) -> bool:
        if self.kind == "quadratic":
            return all(np.array_equal(self.A[0], a) for a in self.A) and \
                all(np.array_equal(self.b[0], v) for v in self.b)
        return all(np.array_equal(self.X[0], v) for v in self.X) and \
            all(np.array_equal(self.y[0], v) for v in self.y)

    def worker_f(self, i: int, x: np.ndarray) -> float:
        if self.kind == "quadratic":
            return float(0.5 * x @ self.A[i] @ x - self.b[i] @ x)
        z = self.y[i] * (self.X[i] @ x)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.reg * x @ x)

    def worker_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            return self.A[i] @ x - self.b[i]
        z = self.y[i] * (self.X[i] @ x)
        w = -self.y[i] * _sigmoid(-z)
        return self.X[i].T @ w / self.X[i].shape[0] + self.reg * x

    def f(self, x) -> float:
        return float(np.mean([self.worker_f(i, x) for i in range(self.n)]))

    def grad(self, x) -> np.ndarray:
        return np.mean([self.worker_grad(i, x) for i in range(self.n)], axis=0)

    def hessian(self, x) -> np.ndarray:
        if self.kind == "quadratic":
            return self.A.mean(axis=0)
        H = np.zeros((self.d, self.d))
        for i in range(self.n):
            z = self.y[i] * (self.X[i] @ x)
            s = _sigmoid(z) * _sigmoid(-z)
            H += (self.X[i].T * s) @ self.X[i] / self.X[i].shape[0]
        return H / self.n + self.reg * np.eye(self.d)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def quadratic_problem(d: int, n: int, seed: int = 0, mu: float = 0.1, L: float = 1.0,
                      sigma_add: float = 0.0, scale: float = 1.0, heterogeneity: float = 0.0) -> SyntheticProblem:
    """Quadratic with spectrum spread over ``[mu, L]`` and minimiser of norm ~ ``scale sqrt(d)``.

    ``heterogeneity > 0`` gives each worker its own linear term; offsets sum to zero.
    """
    g = np.random.default_rng([seed, 0x51])
    Q, _ = np.linalg.qr(g.standard_normal((d, d)))
    eig = np.linspace(mu, L, d) if d > 1 else np.array([L])
    A = (Q * eig) @ Q.T
    A = 0.5 * (A + A.T)
    x_star = scale * g.standard_normal(d)
    b = A @ x_star
    offsets = heterogeneity * g.standard_normal((n, d))
    offsets -= offsets.mean(axis=0)
    return SyntheticProblem("quadratic", d, n, sigma_add, np.repeat(A[None], n, axis=0),
                            b[None, :] + offsets)


def logistic_problem(d: int, n: int, m: int = 50, seed: int = 0, reg: float = 0.1,
                     sigma_add: float = 0.0, identical: bool = True) -> SyntheticProblem:
    g = np.random.default_rng([seed, 0x10])
    w = g.standard_normal(d)
    count = 1 if identical else n
    X = g.standard_normal((count, m, d)) / math.sqrt(d)
    y = np.where(X @ w + 0.5 * g.standard_normal((count, m)) >= 0, 1.0, -1.0)
    if identical:
        X, y = np.repeat(X, n, axis=0), np.repeat(y, n, axis=0)
    return SyntheticProblem("logistic", d, n, sigma_add, X=X, y=y, reg=reg)


@dataclass(frozen=True)
class ProblemConstants:
    L: float
    sigma2: float
    zeta2: float
    f0_minus_fstar: float
    fstar: float
    zeta2_estimated: bool

    def spec(self, n: int) -> ProblemSpec:
        return ProblemSpec(n, self.sigma2, self.zeta2, self.L, self.f0_minus_fstar)


def _newton(problem: SyntheticProblem, x: np.ndarray, iters: int = 100) -> np.ndarray:
    for _ in range(iters):
        g = problem.grad(x)
        if np.linalg.norm(g) < 1e-13:
            break
        x = x - np.linalg.solve(problem.hessian(x), g)
    return x


def measure_problem_constants(problem: SyntheticProblem, x0: np.ndarray | None = None,
                              grid: int = 16, seed: int = 0) -> ProblemConstants:
    """``L``, ``sigma^2``, ``zeta^2`` and ``f(x0) - f*`` for a synthetic problem.

    ``zeta^2`` is exact for identical workers and for quadratics sharing one
    Hessian; otherwise it is the worst value over a random grid of points and
    flagged as an estimate.
    """
    if problem.d > 10 ** 4:
        raise ConfigurationError("problem too large for an eigendecomposition")
    x0 = np.zeros(problem.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    if problem.kind == "quadratic":
        for a in problem.A:
            ev = np.linalg.eigvalsh(a)
            if ev[0] < -1e-10 * max(1.0, abs(ev[-1])):
                raise ConfigurationError("quadratic term is not positive semidefinite")
        H = problem.A.mean(axis=0)
        L = float(np.linalg.eigvalsh(H)[-1])
        x_star = np.linalg.lstsq(H, problem.b.mean(axis=0), rcond=None)[0]
    else:
        X = problem.X.reshape(-1, problem.d)
        L = 0.25 * float(np.linalg.eigvalsh(X.T @ X)[-1]) / X.shape[0] + problem.reg
        x_star = _newton(problem, np.zeros(problem.d))
    fstar = problem.f(x_star)
    sigma2 = problem.d * problem.sigma_add ** 2
    estimated = False
    if problem.identical:
        zeta2 = 0.0
    elif problem.kind == "quadratic" and all(np.array_equal(problem.A[0], a) for a in problem.A):
        dev = problem.b - problem.b.mean(axis=0)
        zeta2 = float(np.mean(np.sum(dev * dev, axis=1)))
    else:
        estimated = True
        g = np.random.default_rng([seed, 0x7A])
        spread = max(1.0, float(np.linalg.norm(x_star - x0)))
        points = [x0, x_star] + [x_star + spread * g.standard_normal(problem.d) / math.sqrt(problem.d)
                                 for _ in range(grid)]
        worst = np.zeros(problem.n)
        for x in points:
            full = problem.grad(x)
            for i in range(problem.n):
                worst[i] = max(worst[i], float(np.sum((problem.worker_grad(i, x) - full) ** 2)))
        zeta2 = float(worst.mean())
    return ProblemConstants(L, sigma2, zeta2, problem.f(x0) - fstar, fstar, estimated)


def payload_bits(spec: CompressorSpec, d: int) -> int:
    """Bits to ship one compressed vector.

    Dense formats: 32 bits (raw), 9 (natural compression) or the dithering
    payload.  A chain containing sparsification ships ``q`` survivors plus
    ``ceil(log2 d)`` index bits each, valued by the outermost other link.
    """
    v = spec.variant
    if v in (Variant.IDENTITY, Variant.INT_ROUND):
        return 32 * d
    if v is Variant.NAT:
        return 9 * d
    if v in (Variant.STD_DITHER, Variant.NAT_DITHER):
        return dither_payload_bits(d, spec.s_levels, spec.norm_mode)
    index = max(1, math.ceil(math.log2(d))) if d > 1 else 1
    if v is Variant.SPARSIFY:
        return spec.q_coords * (32 + index)
    sparse = [c for c in spec.chain if c.variant is Variant.SPARSIFY]
    rest = [c for c in spec.chain if c.variant not in (Variant.SPARSIFY, Variant.IDENTITY)]
    if not sparse:
        return payload_bits(rest[0], d) if rest else 32 * d
    q = min(c.q_coords for c in sparse)
    values = payload_bits(rest[0], q) if rest else 32 * q
    return values + q * index


@dataclass
class SgdConfig:
    worker_spec: CompressorSpec = field(default_factory=identity)
    master_spec: CompressorSpec = field(default_factory=identity)
    eta: float | str = "thm:0.1"
    T: int | None = None
    seed: int = 0
    aggregation: str = "exact"
    ina_address: tuple[str, int] | None = None
    ina_seed: int | None = None
    ina_chunk: int = ina.MAX_CHUNK

    def __post_init__(self) -> None:
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATION_MODES}")
        if self.aggregation != "exact":
            if self.worker_spec.variant is not Variant.NAT or self.master_spec.variant is not Variant.NAT:
                raise ConfigurationError("integer aggregation needs natural compression on both sides")
            if self.aggregation == "ina-socket" and self.ina_address is None:
                raise ConfigurationError("ina-socket aggregation needs an address")
        if self.T is not None and self.T < 1:
            raise ConfigurationError("T must be >= 1")


@dataclass
class RunTrace:
    k: np.ndarray
    f: np.ndarray
    grad_norm2: np.ndarray
    bits_w2m: np.ndarray
    bits_m2w: np.ndarray
    x_final: np.ndarray
    f_final: float
    sampled_index: int
    eta: float
    alpha: float
    beta: float
    bound: float
    clipped: int = 0
    zeta2_estimated: bool = False

    @property
    def bound_tolerance(self) -> float:
        """Multiplier on the bound; estimated heterogeneity doubles it."""
        return 2.0 if self.zeta2_estimated else 1.0

    @property
    def sampled_grad_norm2(self) -> float:
        return float(self.grad_norm2[self.sampled_index])

    @property
    def mean_grad_norm2(self) -> float:
        """Expectation of the sampled-iterate gradient norm over the uniform index."""
        return float(np.mean(self.grad_norm2))

    def rows(self):
        for i in range(self.k.size):
            yield (int(self.k[i]), float(self.f[i]), float(self.grad_norm2[i]),
                   int(self.bits_w2m[i]), int(self.bits_m2w[i]))


def write_trace_csv(trace: RunTrace, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for k, f, g, bw, bm in trace.rows():
        w.writerow((k, repr(f), repr(g), bw, bm))


def _resolve_eta(config: SgdConfig, spec: ProblemSpec, alpha: float, beta: float) -> tuple[float, int]:
    eta = config.eta
    if isinstance(eta, str):
        rule, _, arg = eta.partition(":")
        if rule in ("thm", "auto-thm"):
            eps = float(arg) if arg else 0.1
            ib = iteration_bound(spec, alpha, beta, eps, "thm")
            return ib.eta, config.T or ib.T
        if rule in ("sqrt", "auto-sqrt"):
            T = config.T or (int(arg) if arg else None)
            try:
                ib = iteration_bound(spec, alpha, beta, 1.0, "sqrt", T)
            except ZeroDivisionError:
                raise ConfigurationError("square-root step size needs alpha > 0") from None
            return ib.eta, T or ib.T
        try:
            eta = float(eta)
        except ValueError:
            raise ConfigurationError(f"unknown step size rule {config.eta!r}") from None
    if not 0 < eta < 2 / (beta * spec.L):
        raise ConfigurationError(f"eta={eta} outside (0, 2/(beta L)) = (0, {2 / (beta * spec.L):.6g})")
    if config.T is None:
        raise ConfigurationError("an explicit step size needs T")
    return float(eta), config.T


def session_id(seed: int, k: int) -> int:
    """Aggregation session for iteration ``k``; distinct across seeds on one server."""
    return ((seed & 0xFFFFFFFF) << 32) | k


class _SocketAggregator:
    def __init__(self, config: SgdConfig, n: int, d: int) -> None:
        self.config, self.n, self.d = config, n, d

    def __call__(self, rows: list[np.ndarray], k: int) -> np.ndarray:
        cfg = self.config
        sid = session_id(cfg.seed, k)
        clients = [ina.InaClient(cfg.ina_address, sid, i, self.n, self.d, cfg.ina_chunk)
                   for i in range(self.n)]
        try:
            for client, codes in zip(clients, rows):
                client.send_vector(codes)
            results = [client.recv_vector() for client in clients]
        finally:
            for c in clients:
                c.close()
        if any(not np.array_equal(results[0], r) for r in results[1:]):
            raise ProtocolError("workers received different aggregates")
        return results[0]


def run(problem: SyntheticProblem, config: SgdConfig, constants: ProblemConstants | None = None) -> RunTrace:
    """Run ``T`` iterations from ``x0 = 0``.

    Per iteration: every worker compresses its noisy gradient, the master
    sums the messages, compresses the sum once and broadcasts it, and all
    workers step by ``eta / n`` times the broadcast.
    """
    n, d = problem.n, problem.d
    constants = constants or measure_problem_constants(problem)
    spec = constants.spec(n)
    wW = omega_of(config.worker_spec, d)
    wM = omega_of(config.master_spec, d)
    alpha, beta = alpha_beta(spec, wW, wM)
    eta, T = _resolve_eta(config, spec, alpha, beta)
    bound = gradient_bound(spec, alpha, beta, eta, T)

    noise = [np.random.default_rng([config.seed, 0x6E, i]) for i in range(n)]
    pick = np.random.default_rng([config.seed, 0x61])
    x = np.zeros(d)
    f0 = problem.f(x)
    gap0 = max(f0 - constants.fstar, np.finfo(float).tiny)
    f_hist = np.empty(T)
    g_hist = np.empty(T)
    bits_up = payload_bits(config.worker_spec, d) if config.aggregation == "exact" else 8 * d
    bits_down = payload_bits(config.master_spec, d) if config.aggregation == "exact" else 8 * d
    ina_stats = ina.AggregateStats()
    clipped = 0
    socket_agg = _SocketAggregator(config, n, d) if config.aggregation == "ina-socket" else None
    ina_seed = config.seed if config.ina_seed is None else config.ina_seed
    for k in range(T):
        fk = problem.f(x)
        if not math.isfinite(fk) or fk - constants.fstar > DIVERGENCE_FACTOR * gap0:
            raise DivergenceError(f"iteration {k}: f - f* = {fk - constants.fstar:.6g} left the guard")
        f_hist[k] = fk
        full = problem.grad(x)
        g_hist[k] = float(full @ full)
        msgs = []
        for i in range(n):
            g_i = problem.worker_grad(i, x)
            if problem.sigma_add > 0:
                g_i = g_i + problem.sigma_add * noise[i].standard_normal(d)
            try:
                msgs.append(compress(g_i, config.worker_spec, RngStream(config.seed, k * (n + 1) + i)))
            except InvalidInputError as exc:
                raise DivergenceError(f"iteration {k}: {exc}") from exc
        master_rng = RngStream(config.seed, k * (n + 1) + n)
        if config.aggregation == "exact":
            total = np.sum(np.asarray(msgs, dtype=np.float64), axis=0)
            if config.master_spec.variant is Variant.IDENTITY:
                g = total
            else:
                g = compress(total, config.master_spec, master_rng).astype(np.float64)
        else:
            rows = []
            for m in msgs:
                codes, c = nat8c_codes(m)
                clipped += c
                rows.append(codes)
            if socket_agg is not None:
                out = socket_agg(rows, k)
            else:
                out = ina.aggregate_vector(rows, ina_seed, session_id(config.seed, k),
                                           config.ina_chunk, stats=ina_stats)
            g = nat8c_values(out).astype(np.float64)
        x = x - (eta / n) * g
    return RunTrace(np.arange(T), f_hist, g_hist, np.full(T, bits_up, dtype=np.int64),
                    np.full(T, bits_down, dtype=np.int64), x, problem.f(x),
                    int(pick.integers(T)), eta, alpha, beta, bound,
                    clipped + ina_stats.clipped + ina_stats.saturated, constants.zeta2_estimated)


# ---------------------------------------------------------------------------
# configuration files

_INT_KEYS = {"d", "n", "T", "seed", "problem_seed", "m", "seeds", "ina_chunk", "ina_seed"}
_FLOAT_KEYS = {"sigma_add", "mu", "L", "scale", "heterogeneity", "reg"}


def parse_config_text(text: str) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {value!r}") from None
    return out


def build_from_config(cfg: dict) -> tuple[SyntheticProblem, SgdConfig]:
    known = _INT_KEYS | _FLOAT_KEYS | {"problem", "worker_spec", "master_spec", "eta",
                                       "aggregation", "ina_address", "identical"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kind = cfg.get("problem", "quadratic")
    d, n = cfg.get("d", 100), cfg.get("n", 4)
    pseed = cfg.get("problem_seed", 0)
    if kind == "quadratic":
        problem = quadratic_problem(d, n, pseed, cfg.get("mu", 0.1), cfg.get("L", 1.0),
                                    cfg.get("sigma_add", 0.0), cfg.get("scale", 1.0),
                                    cfg.get("heterogeneity", 0.0))
    elif kind == "logistic":
        identical = str(cfg.get("identical", "1")).lower() in ("1", "true", "yes")
        problem = logistic_problem(d, n, cfg.get("m", 50), pseed, cfg.get("reg", 0.1),
                                   cfg.get("sigma_add", 0.0), identical)
    else:
        raise ConfigurationError(f"unknown problem {kind!r}")
    address = cfg.get("ina_address")
    config = SgdConfig(
        worker_spec=parse_spec(cfg.get("worker_spec", "identity")),
        master_spec=parse_spec(cfg.get("master_spec", "identity")),
        eta=cfg.get("eta", "thm:0.1"),
        T=cfg.get("T"),
        seed=cfg.get("seed", 0),
        aggregation=cfg.get("aggregation", "exact"),
        ina_address=ina.parse_address(address) if address else None,
        ina_seed=cfg.get("ina_seed"),
        ina_chunk=cfg.get("ina_chunk", ina.MAX_CHUNK),
    )
    return problem, config


def load_config(path: str | Path) -> tuple[SyntheticProblem, SgdConfig, list[int]]:
    cfg = parse_config_text(Path(path).read_text())
    seeds = cfg.pop("seeds", None)
    problem, config = build_from_config(cfg)
    run_seeds = [config.seed + i for i in range(seeds)] if seeds else [config.seed]
    return problem, config, run_seeds


def run_seeds(problem: SyntheticProblem, config: SgdConfig, seeds) -> list[RunTrace]:
    constants = measure_problem_constants(problem)
    return [run(problem, replace(config, seed=s), constants) for s in seeds]


def describe(config: SgdConfig) -> str:
    return (f"worker={format_spec(config.worker_spec)} master={format_spec(config.master_spec)} "
            f"eta={config.eta} T={config.T} seed={config.seed} aggregation={config.aggregation}")


__all__ = [
    "SyntheticProblem", "quadratic_problem", "logistic_problem", "ProblemConstants",
    "measure_problem_constants", "SgdConfig", "RunTrace", "run", "run_seeds", "payload_bits",
    "write_trace_csv", "parse_config_text", "build_from_config", "load_config", "describe",
    "TRACE_COLUMNS", "session_id",
]
