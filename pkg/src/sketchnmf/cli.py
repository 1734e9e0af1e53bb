"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data error, 3 convergence budget exceeded.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .bench_io import (
    format_summary,
    gen_synthetic,
    read_config,
    read_matrix_market,
    summarize_traces,
    trace_paths,
    write_matrix_market,
    SEED_ENV,
)
from .cluster import dsanls_run
from .exceptions import InvalidConfigError, SketchNMFError
from .sanls import METHODS, RunConfig, RunTrace, run
from .secure import (
    PROTOCOLS,
    Recovered,
    SecureConfig,
    audit_protocol,
    run_protocol,
    sketch_recovery_attack,
)
from .sketch import GAUSSIAN, SKETCH_KINDS, SUBSAMPLING, gen_sketch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _generate(args) -> int:
    M, _, _ = gen_synthetic(args.m, args.n, args.k, args.noise, args.seed, sparse=args.sparse)
    write_matrix_market(args.out, M)
    print(f"wrote {args.m}x{args.n} matrix to {args.out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    base = read_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("method", "k", "d_frac", "sketch", "alpha", "beta", "eta0", "gamma", "d", "d_prime"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.iters is not None:
        overrides["T"] = args.iters
    if args.seed is not None and not os.environ.get(SEED_ENV):
        overrides["seed"] = args.seed
    if args.clamp:
        overrides["clamp"] = True
    return base.replace(**overrides)


def _check_budget(trace: RunTrace, target) -> int:
    if target is not None and trace.first_reaching(target) is None:
        print(f"target error {target} not reached (final {trace.final_error:.6g})", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def _run(args) -> int:
    M = read_matrix_market(args.data)
    config = _run_config(args)
    if args.nodes > 1:
        _, _, trace, _ = dsanls_run(M, config, args.nodes)
    else:
        _, _, trace = run(M, config)
    trace.to_csv(args.out)
    print(f"{config.method}: {len(trace) - 1} iterations, final rel_err {trace.final_error:.6g}")
    return _check_budget(trace, args.target_error)


def _secure_run(args) -> int:
    M = read_matrix_market(args.data)
    widths = [int(w) for w in args.widths.split(",")] if args.widths else args.parties
    config = SecureConfig(k=args.k, T1=args.outer, T2=args.inner, T=args.inner,
                          d_frac=args.d_frac, rho=args.rho, seed=args.seed, sketch=args.sketch)
    res = run_protocol(M, args.protocol, widths, config)
    if args.out:
        res.trace.to_csv(args.out)
    report = audit_protocol(res.log, res.parties)
    text = report.to_text()
    if args.audit:
        with open(args.audit, "a") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"{args.protocol}: final rel_err {res.trace.final_error:.6g}, "
          f"server updates {res.server_updates}, violations {len(report.violations)}")
    if report.violations:
        return EXIT_DATA
    return _check_budget(res.trace, args.target_error)


def _attack(args) -> int:
    if args.trace:
        with np.load(args.trace) as z:
            count = len([k for k in z.files if k.startswith("S_")])
            pairs = [(z[f"S_{i}"], z[f"P_{i}"]) for i in range(count)]
    else:
        rng = np.random.default_rng(args.seed)
        M = rng.uniform(size=(args.m, args.n))
        pairs = []
        for i in range(args.pairs):
            S = gen_sketch(args.sketch, args.seed, i, args.n, args.d)
            pairs.append((S.to_dense(), M @ S.to_dense()))
        if args.record:
            np.savez(args.record, **{f"S_{i}": S for i, (S, _) in enumerate(pairs)},
                     **{f"P_{i}": P for i, (_, P) in enumerate(pairs)})
    result = sketch_recovery_attack(pairs)
    if isinstance(result, Recovered):
        if not args.trace:
            err = np.linalg.norm(result.M - M) / np.linalg.norm(M)
            verdict = "rel_err ≤ 1e-8" if err <= 1e-8 else f"rel_err {err:.3g}"
            print(f"recovered, {verdict}")
        else:
            print(f"recovered, rank {result.rank}")
        if args.out:
            np.save(args.out, result.M)
    else:
        print(f"underdetermined, rank {result.rank} of {result.n}")
    return EXIT_OK


def _report(args) -> int:
    paths = trace_paths(args.traces)
    if not paths:
        raise UsageError("report: no trace CSV files given")
    rows = summarize_traces((RunTrace.from_csv(p) for p in paths), args.target_error)
    text = format_summary(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sketchnmf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic Matrix Market file")
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--k", type=int, default=10, help="planted rank")
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sparse", action="store_true", help="write coordinate format")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_generate)

    r = sub.add_parser("run", help="factorise a Matrix Market file and write a trace CSV")
    r.add_argument("--data", required=True)
    r.add_argument("--config", help="key=value file with RunConfig fields")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--k", type=int)
    r.add_argument("--d-frac", dest="d_frac", type=float)
    r.add_argument("--d", type=int)
    r.add_argument("--d-prime", dest="d_prime", type=int)
    r.add_argument("--sketch", choices=SKETCH_KINDS)
    r.add_argument("--iters", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--alpha", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--eta0", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--clamp", action="store_true")
    r.add_argument("--nodes", type=int, default=1)
    r.add_argument("--target-error", dest="target_error", type=float)
    r.add_argument("--out", default="trace.csv")
    r.set_defaults(func=_run)

    s = sub.add_parser("secure-run", help="run a federated protocol and audit its messages")
    s.add_argument("--data", required=True)
    s.add_argument("--protocol", choices=PROTOCOLS, required=True)
    s.add_argument("--parties", type=int, default=4)
    s.add_argument("--widths", help="comma-separated column widths per party")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--outer", type=int, default=20)
    s.add_argument("--inner", type=int, default=5)
    s.add_argument("--d-frac", dest="d_frac", type=float, default=0.1)
    s.add_argument("--sketch", choices=SKETCH_KINDS, default=SUBSAMPLING)
    s.add_argument("--rho", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target-error", dest="target_error", type=float)
    s.add_argument("--out", help="trace CSV")
    s.add_argument("--audit", help="append the audit report to this file")
    s.set_defaults(func=_secure_run)

    a = sub.add_parser("attack", help="recover M from observed (S, M S) pairs")
    a.add_argument("--trace", help="npz with arrays S_i and P_i")
    a.add_argument("--pairs", type=int, default=1)
    a.add_argument("--n", type=int, default=20)
    a.add_argument("--d", type=int, default=5)
    a.add_argument("--m", type=int, default=8)
    a.add_argument("--sketch", choices=SKETCH_KINDS, default=GAUSSIAN)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--record", help="save the generated pairs to this npz")
    a.add_argument("--out", help="save the recovered matrix (.npy)")
    a.set_defaults(func=_attack)

    rep = sub.add_parser("report", help="summarise trace CSVs")
    rep.add_argument("traces", nargs="+", help="CSV files or directories")
    rep.add_argument("--target-error", dest="target_error", type=float)
    rep.add_argument("--out")
    rep.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except InvalidConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SketchNMFError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
