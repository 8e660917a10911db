"""Command line entry point: ``taylor-attention <subcommand>``.

Exit codes: 0 success, 1 failed invariant, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from . import bench
from .basis import basis_csv, build_basis_family, build_degree_basis
from .exceptions import DomainError, ElementBudgetError
from .selftest import run_selftest

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--d", type=_int_list, default=None,
                        help="comma-separated head widths (d_K = d_V)")
    common.add_argument("--p-max", type=int, default=4, help="truncation orders 1..p-max")
    common.add_argument("--n", type=int, default=None, help="context length")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--chunk", type=int, default=0, help="scan chunk size; 0 = sequential")
    common.add_argument("--precision", choices=("double", "single"), default="double")
    common.add_argument("--out", type=Path, default=None, help="output path (default stdout)")
    common.add_argument("--format", choices=("csv",), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="taylor-attention", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("basis", parents=[common], help="export index matrices and multiplicities")

    for name, text in (("recon", "reconstruction error vs softmax attention"),
                       ("recon-by-pos", "reconstruction error by token position")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--fallback-degree-zero", action="store_true",
                       help="replace degenerate-denominator outputs by the running mean")

    p = sub.add_parser("perf", parents=[common], help="per-token time and state bytes vs n")
    p.add_argument("--n-min", type=int, default=1000)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--conv-max-n", type=int, default=100_000,
                   help="record conventional rows beyond this n as capped")

    p = sub.add_parser("cost", parents=[common], help="closed-form cost tables")
    p.add_argument("--heads", type=_int_list, default=[1])
    p.add_argument("--lengths", type=_int_list, default=None,
                   help="context lengths (default: --n, else 1000,1000000)")
    p.add_argument("--alpha-out", type=Path, default=None,
                   help="Taylor weight table (default: <out stem>_alpha.csv)")

    p = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    p.add_argument("--quick", action="store_true", help="skip the 10^6-update state check")
    return parser


@contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _config(args, default_widths, default_n):
    return bench.ExperimentConfig(
        head_widths=args.d or default_widths,
        truncation_orders=list(range(1, args.p_max + 1)),
        context_length=default_n if args.n is None else args.n,
        seed=args.seed,
        precision_mode=args.precision,
        chunk_size=args.chunk,
        output_path=args.out,
        workers=getattr(args, "workers", 1),
        on_degenerate="fallback" if getattr(args, "fallback_degree_zero", False) else "flag",
    )


def _cmd_basis(args):
    widths = args.d or [4]
    if len(widths) != 1:
        raise DomainError("basis export takes a single --d")
    build_basis_family(widths[0], args.p_max)  # budget check
    bases = [build_degree_basis(widths[0], p) for p in range(args.p_max)]
    with _output(args.out) as fh:
        fh.write(basis_csv(bases))
    return EXIT_OK


def _emit(summary, args, writer):
    if args.out is None:
        writer(summary, sys.stdout)


def _cmd_recon(args):
    summary = bench.run_reconstruction(_config(args, [4, 8, 16, 32], 2048))
    _emit(summary, args, bench.write_reconstruction_csv)
    return EXIT_OK


def _cmd_recon_by_pos(args):
    summary = bench.run_error_by_position(_config(args, [4, 8, 16, 32], 2048))
    _emit(summary, args, bench.write_position_csv)
    return EXIT_OK


def _cmd_perf(args):
    config = _config(args, [8], 1_000_000)
    rows = bench.run_perf(config, n_min=args.n_min, runs=args.runs,
                          conventional_max_n=args.conv_max_n)
    if args.out is None:
        bench.write_perf_csv(rows, sys.stdout)
    return EXIT_OK


def _cmd_cost(args):
    widths = args.d or [16, 32, 64, 128]
    lengths = args.lengths or ([args.n] if args.n is not None else [1000, 1_000_000])
    orders = list(range(1, args.p_max + 1))
    alpha_path = args.alpha_out
    if alpha_path is None and args.out is not None:
        alpha_path = args.out.with_name(args.out.stem + "_alpha.csv")
    with _output(args.out) as fh:
        if alpha_path is None:
            bench.emit_cost_tables(widths, orders, lengths, args.heads, stream=fh)
        else:
            with open(alpha_path, "w", encoding="utf-8", newline="") as afh:
                bench.emit_cost_tables(widths, orders, lengths, args.heads, stream=fh,
                                       alpha_stream=afh)
    return EXIT_OK


def _cmd_selftest(args):
    results = run_selftest(args.seed, quick=args.quick)
    with _output(args.out) as fh:
        for r in results:
            fh.write(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.1f}s): {r.detail}\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {
    "basis": _cmd_basis,
    "recon": _cmd_recon,
    "recon-by-pos": _cmd_recon_by_pos,
    "perf": _cmd_perf,
    "cost": _cmd_cost,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DomainError, ElementBudgetError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
