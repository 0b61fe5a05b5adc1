"""Command line entry point: ``metalab <subcommand> --config cfg.json --out out.csv``.

Exit codes: 0 success, 1 validation/input error, 2 a certified inequality (or
gradient check) failed.
"""
import argparse
import csv
import io
import os
import sys
import tempfile
from functools import partial

from .._errors import MetalabError
from . import experiments as ex
from .config import MODES, load_config

EXIT_OK, EXIT_INVALID, EXIT_VIOLATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INVALID)


def build_parser():
    parser = _Parser(prog="metalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output CSV path (written atomically)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv_atomic(path, columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".metalab-", suffix=".csv", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rl_audit_row(cfg, seed):
    return ex.audit_rl_seed(cfg, seed)[0]


def _sl_audit_rows(cfg, seed):
    return ex.audit_sl_seed(cfg, seed)[0]


def run(mode, cfg, out):
    """Execute one pipeline; returns ``(exit_code, summary_line)``."""
    if mode == "train-rl":
        rows, state = ex.train_rl(cfg)
        write_csv_atomic(out, ex.TRAIN_COLUMNS, rows)
        return EXIT_OK, (f"train-rl: {state.iteration} iterations, L={state.objective_history[-1]:.6g}, "
                         f"eps={state.epsilon:.3g}")
    if mode == "train-sl":
        rows, state = ex.train_sl(cfg)
        write_csv_atomic(out, ex.TRAIN_COLUMNS, rows)
        return EXIT_OK, (f"train-sl: {state.iteration} iterations, L={state.objective_history[-1]:.6g}, "
                         f"eps={state.epsilon:.3g}")
    seeds = [cfg.seed + k for k in range(cfg.n_seeds)]
    if mode == "audit-rl":
        rows = ex.ordered_map(partial(_rl_audit_row, cfg), seeds)
        cols = ex.AUDIT_RL_NEURAL_COLUMNS if cfg.neural else ex.AUDIT_RL_COLUMNS
        write_csv_atomic(out, cols, rows)
        held = sum(r["holds"] for r in rows)
        code = EXIT_OK if held == len(rows) else EXIT_VIOLATION
        return code, f"audit-rl: bound holds on {held}/{len(rows)} seeds"
    if mode == "audit-sl":
        rows = [r for chunk in ex.ordered_map(partial(_sl_audit_rows, cfg), seeds) for r in chunk]
        cols = ex.AUDIT_SL_NEURAL_COLUMNS if cfg.neural else ex.AUDIT_SL_COLUMNS
        write_csv_atomic(out, cols, rows)
        held = sum(r["holds"] for r in rows)
        code = EXIT_OK if held == len(rows) else EXIT_VIOLATION
        return code, f"audit-sl: bounds hold on {held}/{len(rows)} audits"
    if mode == "nn-linerr":
        rows, slope = ex.linerr_sweep(cfg)
        write_csv_atomic(out, ex.LINERR_COLUMNS, rows)
        return EXIT_OK, f"nn-linerr: log-log slope vs width = {slope:.4f}"
    if mode == "gradcheck":
        rows = ex.gradcheck(cfg)
        write_csv_atomic(out, ex.GRADCHECK_COLUMNS, rows)
        worst = max(r["rel_error"] for r in rows)
        code = EXIT_OK if all(r["passed"] for r in rows) else EXIT_VIOLATION
        return code, f"gradcheck: {len(rows)} checks, worst relative error {worst:.3g}"
    raise MetalabError(f"unknown mode {mode}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
        code, summary = run(args.command, cfg, args.out)
    except (MetalabError, OSError) as exc:
        sys.stderr.write(f"metalab {args.command}: {exc}\n")
        return EXIT_INVALID
    print(summary)
    return code


if __name__ == "__main__":
    sys.exit(main())
