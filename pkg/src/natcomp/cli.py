"""Command-line entry point: ``natcomp <command> ...``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import math
import sys
from dataclasses import replace

import numpy as np

from . import bounds, codec, ina, sgd, variance
from .errors import (ConfigurationError, DivergenceError, EncodeError, FormatError,
                     InvalidInputError, ProtocolError, SessionError, UnboundedSecondMomentError)
from .operators import Variant, compress, format_spec, parse_spec
from .rng import RngStream

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4

HIST_COLUMNS = ("exponent", "count")
COMPRESS_STATS_COLUMNS = ("spec", "codec", "d", "payload_bits", "block_bytes", "ratio_vs_binary32",
                          "relative_sq_error")
SGD_SEED_COLUMNS = ("seed", "T", "eta", "f_final", "sampled_grad_norm2", "mean_grad_norm2", "bound")
BOUNDS_COLUMNS = ("key", "value")


class UsageError(Exception):
    pass


def _emit(args, columns, rows) -> None:
    """Write rows as CSV or JSON lines to ``--out`` (stdout when absent)."""
    with _open_out(args.out) as fh:
        if args.format == "json-lines":
            for row in rows:
                fh.write(json.dumps(dict(zip(columns, row)), allow_nan=True) + "\n")
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            w.writerows(rows)


@contextlib.contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _announce_seed(args) -> int:
    print(f"seed={args.seed}", file=sys.stderr)
    return args.seed


def _p_arg(text: str) -> float:
    if text == "inf":
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"norm must be 1, 2 or inf, got {text!r}") from None


# commands ------------------------------------------------------------------------

def cmd_compress(args) -> int:
    seed = _announce_seed(args)
    spec = parse_spec(args.spec)
    x = variance.load_vector_file(args.input)
    if args.out in (None, "-"):
        raise UsageError("compress needs --out for the encoded block")
    rng = RngStream(seed)
    if spec.variant is Variant.NAT:
        y = compress(x, spec, rng)
        if args.codec == "nat8c":
            block, clipped = codec.encode_nat8c(y)
            if clipped:
                print(f"warning: {clipped} exponents clipped", file=sys.stderr)
            name, bits = "NAT8C", 8 * x.size
        else:
            block, name, bits = codec.encode_nat9(y), "NAT9", 9 * x.size
    elif spec.variant in (Variant.STD_DITHER, Variant.NAT_DITHER):
        from .dithering import LevelLadder, dither
        ladder = LevelLadder("geometric" if spec.variant is Variant.NAT_DITHER else "linear", spec.s_levels)
        res = dither(x, ladder, spec.p_norm, spec.norm_mode, rng)
        y = res.reconstructed
        block, name = res.encode(), "DITHER"
        bits = codec.dither_payload_bits(x.size, spec.s_levels, spec.norm_mode)
    else:
        raise UsageError(f"no wire format for {format_spec(spec)}; use nat, stddither or natdither")
    with open(args.out, "wb") as fh:
        fh.write(block)
    x64 = x.astype(np.float64)
    err = float(np.sum((y.astype(np.float64) - x64) ** 2) / np.sum(x64 * x64)) if np.any(x) else 0.0
    row = (format_spec(spec), name, x.size, bits, len(block), (32 * x.size) / bits, err)
    w = csv.writer(sys.stderr, lineterminator="\n")
    w.writerow(COMPRESS_STATS_COLUMNS)
    w.writerow(row)
    return EXIT_OK


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        block = codec.decode(fh.read())
    values = block.values
    if args.format == "json-lines":
        _emit(args, ("index", "value"), [(i, float(v)) for i, v in enumerate(values)])
    else:
        with _open_out(args.out) as fh:
            for v in values:
                fh.write(f"{float(v)!r}\n")
    return EXIT_OK


def cmd_variance(args) -> int:
    seed = _announce_seed(args)
    specs = [parse_spec(s) for s in args.spec]
    law = "file" if args.input else "gaussian"
    reports = [variance.empirical_omega(spec, args.d, args.trials, law, RngStream(seed), args.input)
               for spec in specs]
    if args.per_trial:
        rows = [(format_spec(r.spec), t, w) for r in reports for t, w in r.trial_rows()]
        _emit(args, ("spec",) + variance.TRIAL_COLUMNS, rows)
    else:
        rows = [r.summary_row() for r in reports]
        _emit(args, variance.SUMMARY_COLUMNS, rows)
    return EXIT_OK


def cmd_bounds(args) -> int:
    spec = parse_spec(args.spec)
    problem = None
    if args.L is not None:
        problem = bounds.ProblemSpec(args.n, args.sigma2, args.zeta2, args.L, args.f0_gap)
    master = parse_spec(args.master) if args.master else None
    report = bounds.bounds_report(spec, args.d, problem, master)
    if problem is not None and args.eps is not None:
        ib = bounds.iteration_bound(problem, report["alpha"], report["beta"], args.eps)
        report.update(eta=ib.eta, T=ib.T)
    _emit(args, BOUNDS_COLUMNS, list(report.items()))
    return EXIT_OK


def cmd_cost_table(args) -> int:
    rules = {"index_rule": args.index_rule, "kappa_rule": args.kappa_rule,
             "sparse_value_bits": args.sparse_value_bits}
    cells = bounds.printed_tables(args.d, args.q, args.p, **rules)
    if args.model is not None:
        cells = [c for c in cells if c.model == args.model]
    _emit(args, bounds.TABLE_COLUMNS, bounds.table_rows(cells))
    return EXIT_OK


def cmd_fig1(args) -> int:
    rows = bounds.fig1_rows(args.d, args.p)
    _emit(args, bounds.FIG1_COLUMNS, rows)
    return EXIT_OK


def cmd_sgd(args) -> int:
    problem, config, seeds = sgd.load_config(args.config)
    if args.seed_given:
        config = replace(config, seed=args.seed)
        seeds = [args.seed + (s - seeds[0]) for s in seeds]
    if args.T is not None:
        config = replace(config, T=args.T)
    print(f"seed={config.seed}", file=sys.stderr)
    print(sgd.describe(config), file=sys.stderr)
    if len(seeds) == 1:
        trace = sgd.run(problem, replace(config, seed=seeds[0]))
        _emit(args, sgd.TRACE_COLUMNS, list(trace.rows()))
        print(f"f_final={trace.f_final!r} mean_grad_norm2={trace.mean_grad_norm2!r} "
              f"bound={trace.bound!r}", file=sys.stderr)
    else:
        traces = sgd.run_seeds(problem, config, seeds)
        rows = [(s, int(t.k.size), t.eta, t.f_final, t.sampled_grad_norm2, t.mean_grad_norm2, t.bound)
                for s, t in zip(seeds, traces)]
        _emit(args, SGD_SEED_COLUMNS, rows)
    return EXIT_OK


def cmd_ina_serve(args) -> int:
    seed = _announce_seed(args)
    server = ina.InaServer(ina.parse_address(args.listen), args.workers, seed, args.timeout, args.strict)
    host, port = server.address
    print(f"listening on {host}:{port} for {args.workers} workers", file=sys.stderr, flush=True)
    try:
        server.serve_forever(poll_interval=0.05)
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_ina_worker(args) -> int:
    seed = _announce_seed(args)
    x = variance.load_vector_file(args.input)
    y = compress(x, parse_spec("nat"), RngStream(seed, args.worker_id))
    codes, clipped = codec.nat8c_codes(y)
    if clipped:
        print(f"warning: {clipped} exponents clipped", file=sys.stderr)
    with ina.InaClient(ina.parse_address(args.connect), args.session, args.worker_id, args.workers,
                       x.size, args.chunk) as client:
        out = client.allreduce(codes)
    values = codec.nat8c_values(out)
    with _open_out(args.out) as fh:
        for v in values:
            fh.write(f"{float(v)!r}\n")
    return EXIT_OK


def cmd_hist(args) -> int:
    hist = codec.exponent_histogram(variance.load_vector_file(args.input))
    rows = [(e, c) for e, c in hist.counts.items()] + [("zero", hist.zeros)]
    _emit(args, HIST_COLUMNS, rows)
    return EXIT_OK


# parser --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", default=None, help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "json-lines"), default=None)

    ap = _Parser(prog="natcomp", description=__doc__, parents=[common])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("compress", cmd_compress, "compress a vector file into an encoded block")
    p.add_argument("input")
    p.add_argument("--spec", required=True)
    p.add_argument("--codec", choices=("nat9", "nat8c"), default="nat9")

    p = add("decode", cmd_decode, "decode a block back to one value per line")
    p.add_argument("input")

    p = add("variance", cmd_variance, "empirical omega over random trials")
    p.add_argument("--spec", action="append", required=True)
    p.add_argument("--d", type=int, default=10 ** 5)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--input", default=None, help="fixed vector file instead of Gaussian inputs")
    p.add_argument("--per-trial", action="store_true")

    p = add("bounds", cmd_bounds, "analytic omega, and alpha/beta for a problem")
    p.add_argument("--spec", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--master", default=None)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--sigma2", type=float, default=0.0)
    p.add_argument("--zeta2", type=float, default=0.0)
    p.add_argument("--L", type=float, default=None)
    p.add_argument("--f0-gap", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=None)

    p = add("cost-table", cmd_cost_table, "speedup factors of the cost models")
    p.add_argument("--model", type=int, choices=bounds.MODELS, default=None)
    p.add_argument("--d", type=int, default=10 ** 6)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--p", type=_p_arg, default=2.0)
    p.add_argument("--index-rule", choices=("explicit", "binomial"), default="explicit")
    p.add_argument("--kappa-rule", choices=("one", "min"), default="one")
    p.add_argument("--sparse-value-bits", type=int, default=9)

    p = add("fig1", cmd_fig1, "second moment against bits per vector")
    p.add_argument("--d", type=int, default=10 ** 6)
    p.add_argument("--p", type=_p_arg, default=2.0)

    p = add("sgd", cmd_sgd, "run compressed distributed SGD from a config file")
    p.add_argument("config")
    p.add_argument("--T", type=int, default=None)

    p = add("hist", cmd_hist, "exponent histogram of a vector file")
    p.add_argument("input")

    p = add("ina", None, "integer aggregation service and worker")
    ina_sub = p.add_subparsers(dest="ina_command", required=True, parser_class=_Parser)
    s = ina_sub.add_parser("serve", parents=[common])
    s.set_defaults(func=cmd_ina_serve)
    s.add_argument("--listen", default="127.0.0.1:9999")
    s.add_argument("--workers", type=int, required=True)
    s.add_argument("--timeout", type=float, default=ina.DEFAULT_TIMEOUT)
    s.add_argument("--strict", action="store_true", help="trap non-integer values in the hot path")
    w = ina_sub.add_parser("worker", parents=[common])
    w.set_defaults(func=cmd_ina_worker)
    w.add_argument("input")
    w.add_argument("--connect", default="127.0.0.1:9999")
    w.add_argument("--worker-id", type=int, required=True)
    w.add_argument("--workers", type=int, required=True)
    w.add_argument("--session", type=int, default=0)
    w.add_argument("--chunk", type=int, default=ina.MAX_CHUNK)
    return ap


def _merge_globals(ns, argv) -> None:
    # parents=[common] on every level means a subparser default can hide a
    # value given before the subcommand, so reparse the prefix on its own
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--seed", type=int)
    pre.add_argument("--out")
    pre.add_argument("--format")
    first, _ = pre.parse_known_args(argv)
    for name in ("seed", "out", "format"):
        if getattr(ns, name) is None:
            setattr(ns, name, getattr(first, name))
    ns.seed_given = ns.seed is not None
    ns.seed = 0 if ns.seed is None else ns.seed
    ns.format = ns.format or "csv"


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        _merge_globals(args, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"natcomp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, UnboundedSecondMomentError) as exc:
        print(f"natcomp: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        sys.stderr.close()
        return EXIT_OK
    except (InvalidInputError, FormatError, EncodeError, OSError, UnicodeDecodeError) as exc:
        print(f"natcomp: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, SessionError, ProtocolError) as exc:
        print(f"natcomp: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
