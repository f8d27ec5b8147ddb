"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime or simulation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace

from .attacks import AttackConfigError
from .config import ConfigError, load_config, load_suite
from .plant import SimulationError
from .runner import _report_dict, run_roc, run_scenario, run_suite, write_calibration
from .metrics import MetricsReport

log = logging.getLogger("snitchdt")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _print_reports(reports: list[MetricsReport], fmt: str) -> None:
    if fmt == "json":
        print(json.dumps([_report_dict(r) for r in reports], indent=2, sort_keys=True))
        return
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsReport.CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    sys.stdout.write(buf.getvalue())


def _seed(value: str) -> int:
    n = int(value)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snitchdt", description="Digital-twin cyberattack detection for wind farm converters")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit twin thresholds and train the ANN baseline")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=_seed)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")

    s = sub.add_parser("suite", help="run a randomized attack suite")
    s.add_argument("--suite", required=True)
    s.add_argument("--seed", type=_seed)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--no-traces", action="store_true")

    o = sub.add_parser("roc", help="pooled ROC curves for a suite")
    o.add_argument("--suite", required=True)
    o.add_argument("--seed", type=_seed)
    o.add_argument("--out", required=True)
    o.add_argument("--jobs", type=int, default=1)
    return p


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "calibrate":
        cfg = load_config(args.config)
        cal = write_calibration(cfg, args.out)
        log.info("calibrated %d twins into %s", len(cal.twins), args.out)
        return EXIT_OK
    if args.command == "run":
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, master_seed=args.seed)
        art = run_scenario(cfg, args.out, keep_sim=False)
        _print_reports(list(art.reports.values()), args.format)
        return EXIT_OK
    suite = load_suite(args.suite)
    if args.seed is not None:
        suite = replace(suite, master_seed=args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command == "suite":
        result = run_suite(suite, args.out, jobs=args.jobs, write_traces=not args.no_traces)
        _print_reports(result.rows(), args.format)
        if result.failures:
            log.error("%d scenario(s) failed", result.failures)
            return EXIT_RUNTIME
        return EXIT_OK
    roc = run_roc(suite, args.out, jobs=args.jobs)
    for det, (_, auc) in sorted(roc.items()):
        print(f"{det}\tauc={auc:.6f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, AttackConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
