"""Command-line entry points.

``blockcg`` runs an experiment and writes one CSV trace per
``(variant, m)``; ``blockcg-compare`` tabulates existing trace files.

Every flag can also be given through an environment variable named
``BLOCKCG_<FLAG>`` (upper case, dashes as underscores), e.g.
``BLOCKCG_MAXIT=400``. Command-line flags take precedence.

Exit codes: 0 success, 2 bad arguments or unreadable input, 3 preconditioner
build failure, 4 solver failure (traces are still written).
"""
import argparse
import logging
import os
import sys

from .errors import MatrixMarketError, PreconditionerError
from .harness import ExperimentSpec, compare_traces, format_table, run_experiment
from .solvers import VARIANTS
from .sparse import load_matrix_market
from .trace import read_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BUILD = 3
EXIT_SOLVER = 4
ENV_PREFIX = "BLOCKCG_"


def _int_list(s):
    try:
        vals = [int(t) for t in str(s).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {s!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("block sizes must be positive")
    return vals


def _variant_list(s):
    vals = [t.strip().lower() for t in str(s).split(",") if t.strip()]
    bad = [v for v in vals if v not in VARIANTS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {','.join(VARIANTS)}")
    return vals


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def _env_flag(name):
    v = _env(name)
    return v is not None and v.strip().lower() in ("1", "true", "yes", "on")


def build_parser():
    p = argparse.ArgumentParser(
        prog="blockcg",
        description="Run block CG variants on a MatrixMarket matrix and write convergence traces.",
    )
    p.add_argument("--matrix", default=_env("matrix"), help="path to a .mtx or .mtx.gz file")
    p.add_argument("--m", type=_int_list, default=_env("m", "1"),
                   help="block size(s), comma separated (default 1)")
    p.add_argument("--variants", type=_variant_list, default=_env("variants", "dr"),
                   help="comma separated subset of hs,ol,dr,dp,bf (default dr)")
    p.add_argument("--precond", choices=["none", "jacobi", "ic"], default=_env("precond", "none"))
    p.add_argument("--ic-shift", type=float, default=float(_env("ic-shift", 0.0)),
                   help="relative diagonal shift for incomplete Cholesky")
    p.add_argument("--ic-droptol", type=float, default=float(_env("ic-droptol", 0.0)),
                   help="drop tolerance for incomplete Cholesky (0 = IC(0))")
    p.add_argument("--tol", type=float, default=float(_env("tol", 1e-8)),
                   help="per-column relative residual tolerance")
    p.add_argument("--maxit", type=int, default=int(_env("maxit", 500)))
    p.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    p.add_argument("--random-b", action="store_true", default=_env_flag("random-b"),
                   help="uniform random b instead of b = A x_true")
    p.add_argument("--bf-tol", type=float, default=float(_env("bf-tol", 1e-8)),
                   help="relative singular value cutoff for the bf variant")
    p.add_argument("--phi", choices=["identity", "qr"], default=_env("phi", "identity"),
                   help="scaling policy of the ol variant")
    p.add_argument("--dump-jacobi", default=_env("dump-jacobi"), metavar="DIR",
                   help="write reconstructed T_k and LDL factors (.npz) to DIR")
    p.add_argument("--out", default=_env("out", "traces"), help="output directory for traces")
    p.add_argument("--jobs", type=int, default=int(_env("jobs", 1)),
                   help="run independent (variant, m) combinations in parallel")
    p.add_argument("-q", "--quiet", action="store_true", help="do not print the summary table")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if isinstance(args.m, str):
        args.m = _int_list(args.m)
    if isinstance(args.variants, str):
        args.variants = _variant_list(args.variants)
    if not args.matrix:
        print("blockcg: --matrix is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        a = load_matrix_market(args.matrix)
    except (OSError, MatrixMarketError) as exc:
        print(f"blockcg: cannot load {args.matrix}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    spec = ExperimentSpec(
        m_values=args.m,
        variants=args.variants,
        precond=args.precond,
        ic_shift=args.ic_shift,
        ic_droptol=args.ic_droptol,
        tol=args.tol,
        maxit=args.maxit,
        seed=args.seed,
        random_b=args.random_b,
        bf_tol=args.bf_tol,
        phi_policy=args.phi,
        out_dir=args.out,
        dump_jacobi=args.dump_jacobi,
        jobs=args.jobs,
    )
    try:
        result = run_experiment(a, spec)
    except PreconditionerError as exc:
        print(f"blockcg: preconditioner build failed: {exc}", file=sys.stderr)
        return EXIT_BUILD
    except ValueError as exc:
        print(f"blockcg: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if not args.quiet:
        print(format_table(compare_traces(result.traces)))
    for tr in result.traces:
        if tr.termination == "failure":
            print(
                f"blockcg: {tr.meta['variant']} m={tr.meta['m']} failed at iteration "
                f"{tr.failure_iteration}: {tr.failure}",
                file=sys.stderr,
            )
    return EXIT_SOLVER if result.any_failure else EXIT_OK


def compare_main(argv=None):
    p = argparse.ArgumentParser(prog="blockcg-compare", description="Summarize trace files.")
    p.add_argument("traces", nargs="+")
    try:
        args = p.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        traces = [read_trace(path) for path in args.traces]
    except (OSError, ValueError) as exc:
        print(f"blockcg-compare: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(format_table(compare_traces(traces)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
