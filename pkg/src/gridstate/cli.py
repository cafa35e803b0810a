"""Command line entry point.

    gridstate run <convergence|plr|latency> --config PATH [--trials N] [--seed S] [--out DIR]

Exit status: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .errors import ConfigError, GridStateError
from .experiments import EXPERIMENTS, execute, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridstate", description="Distributed power system state estimation experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run an experiment recipe")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", required=True, help="INI experiment config (bundled names are found too)")
    run.add_argument("--trials", type=int, help="override the number of Monte Carlo trials")
    run.add_argument("--seed", type=int, help="override the run seed")
    run.add_argument("--out", type=Path, help="output directory")
    run.add_argument("--workers", type=int, help="worker processes for trials")
    run.add_argument("--no-plot", action="store_true", help="skip PNG figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, experiment=args.experiment)
        changes = {}
        if args.trials is not None:
            changes["trials"] = args.trials
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["out_dir"] = args.out
        if args.workers is not None:
            changes["workers"] = args.workers
        if args.no_plot:
            changes["plot"] = False
        cfg = dataclasses.replace(cfg, **changes)
        cfg.validate()
        status = execute(cfg, seed_override=args.seed)
    except ConfigError as exc:
        print(f"gridstate: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GridStateError, ArithmeticError, ValueError) as exc:
        print(f"gridstate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for msg in status["failed"]:
        print(f"gridstate: {msg}", file=sys.stderr)
    print(f"wrote {len(status['outputs'])} file(s) to {cfg.out_dir}")
    return EXIT_NUMERICAL if status["failed"] else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
