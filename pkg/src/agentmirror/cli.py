"""``bench`` command: run benchmark plans, single auctions, and reports."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .auction import dump_states, parse_scenario, run_auction
from .bench import Bench, BenchPlan, emit_report, parse_plan, read_csv, summary_table
from .errors import BenchAborted, ConfigError, MirrorError, RecoveryFailed

EXIT_OK, EXIT_USAGE, EXIT_ABORTED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with BenchAborted
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bench", description="Mirroring vs. store benchmarks for agent platforms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a benchmark plan")
    run.add_argument("--plan", type=Path, help="key = value plan file (defaults apply when omitted)")
    run.add_argument("--strategy", choices=("mirror", "store"), required=True)
    run.add_argument("--transport", choices=("inproc", "socket"))
    run.add_argument("--clock", choices=("wall", "sim"))
    run.add_argument("--out", type=Path, required=True)

    auc = sub.add_parser("auction", help="run one auction scenario")
    auc.add_argument("--scenario", type=Path, required=True)
    auc.add_argument("--dump", type=Path, help="write final bidder states here")

    rep = sub.add_parser("report", help="summarize a samples.csv")
    rep.add_argument("--in", dest="in_dir", type=Path, required=True)
    rep.add_argument("--format", choices=("csv", "summary"), default="summary")
    return p


def _read(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def cmd_run(args) -> int:
    plan = parse_plan(_read(args.plan)) if args.plan else BenchPlan()
    overrides = {k: v for k, v in (("transport", args.transport), ("clock", args.clock)) if v}
    if overrides:
        plan = BenchPlan(**{**plan.__dict__, **overrides})
    bench = Bench(plan)
    samples = bench.run(args.strategy)
    path = emit_report(samples, args.out, "csv")
    emit_report(samples, args.out, "summary")
    for note in bench.aborts:
        print(f"note: {note}", file=sys.stderr)
    print(f"{len(samples)} samples -> {path}")
    return EXIT_OK


def cmd_auction(args) -> int:
    result = run_auction(parse_scenario(_read(args.scenario)))
    print(result.summary())
    if args.dump:
        args.dump.write_bytes(dump_states(result))
    return EXIT_OK


def cmd_report(args) -> int:
    src = args.in_dir / "samples.csv" if args.in_dir.is_dir() else args.in_dir
    samples = read_csv(_read(src))
    if args.format == "csv":
        path = emit_report(samples, args.in_dir if args.in_dir.is_dir() else args.in_dir.parent, "csv")
        print(path)
    else:
        sys.stdout.write(summary_table(samples))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "auction": cmd_auction, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (BenchAborted, RecoveryFailed) as exc:
        print(f"bench: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, ValueError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MirrorError as exc:
        print(f"bench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
