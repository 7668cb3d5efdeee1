"""Command line: ``tsmsfem <kind> --config FILE --out DIR [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .experiments import DRIVERS, HarnessError, run_experiment

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsmsfem", description="Time-splitting FEM/MsFEM experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in DRIVERS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, help="worker processes for sampled runs")
        p.add_argument("--seed", type=int, help="overrides experiment.seed")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.override) + [f"experiment.kind={args.kind}"]
    if args.workers is not None:
        overrides.append(f"experiment.workers={args.workers}")
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides=overrides)
    except (ConfigError, OSError) as exc:
        print(f"tsmsfem: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_experiment(cfg, args.out)
    except ConfigError as exc:
        print(f"tsmsfem: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HarnessError as exc:
        print(f"tsmsfem: {'numerical failure' if exc.numerical else 'failure'} in {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if exc.numerical else EXIT_OTHER
    except OSError as exc:
        print(f"tsmsfem: {exc}", file=sys.stderr)
        return EXIT_OTHER
    print(f"wrote {len(report.manifest['files']) + len(report.manifest['volatile']) + 1} files to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
