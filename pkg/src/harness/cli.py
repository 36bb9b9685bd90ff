"""Command-line entry point: ``fedem-sim <command> ...``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.harness.report import ReportError, render_report
from src.harness.runner import EXIT_CODES, RunResult, RunStatus, attack_run, train_from_manifest
from src.harness.selftest import CHECKS, run_selftest
from src.harness.settings import HarnessSettings
from src.harness.sweep import SweepError, load_sweep, run_sweep

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedem-sim",
        description="Federated learning simulator for error-minimizing perturbation defenses",
    )
    parser.add_argument("--track", action="store_true", help="log runs to MLflow")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    parser.add_argument("--log-level", default=None, help="override FEDEM_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="run one experiment manifest")
    train.add_argument("manifest", type=Path)

    attack = commands.add_parser("attack", help="re-attack a finished run")
    attack.add_argument("run_dir", type=Path)
    attack.add_argument("--round", dest="round_index", type=int, default=None,
                        help="stored round to attack (default: the manifest's attack rounds)")

    sweep = commands.add_parser("sweep", help="run a one-axis sweep")
    sweep.add_argument("sweep", type=Path)

    report = commands.add_parser("report", help="compare finished runs")
    report.add_argument("run_dirs", type=Path, nargs="+")
    report.add_argument("--output", type=Path, default=Path("."), help="directory for report.txt/report.csv")

    selftest = commands.add_parser("selftest", help="run the built-in oracle checks")
    selftest.add_argument("--only", nargs="+", choices=sorted(CHECKS), default=None)
    return parser


def _settings(args: argparse.Namespace) -> HarnessSettings:
    overrides = {}
    if args.track:
        overrides["track_mlflow"] = True
    if args.progress:
        overrides["progress"] = True
    if args.log_level:
        overrides["log_level"] = args.log_level
    return HarnessSettings(**overrides)


def _print_result(result: RunResult) -> int:
    print(json.dumps({"run_dir": str(result.run_dir), **result.to_dict()}, indent=2, default=str))
    return result.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = _settings(args)
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command == "train":
        return _print_result(train_from_manifest(args.manifest, settings))
    if args.command == "attack":
        return _print_result(attack_run(args.run_dir, args.round_index, settings))
    if args.command == "sweep":
        try:
            result = run_sweep(load_sweep(args.sweep), settings)
        except SweepError as e:
            logger.error("%s", e)
            return EXIT_CODES[RunStatus.CONFIG_ERROR]
        print(f"{len(result.rows)} values, {result.failures} failed -> {result.csv_path}")
        return EXIT_CODES[RunStatus.RUNTIME_ERROR] if result.failures else 0
    if args.command == "report":
        try:
            paths = render_report(args.run_dirs, args.output)
        except ReportError as e:
            logger.error("%s", e)
            return EXIT_CODES[RunStatus.CONFIG_ERROR]
        print(paths[0].read_text(encoding="utf-8"), end="")
        return 0

    results = run_selftest(args.only)
    for check in results:
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name:<20} {check.detail}")
    return 0 if all(check.passed for check in results) else EXIT_CODES[RunStatus.RUNTIME_ERROR]


if __name__ == "__main__":
    sys.exit(main())
