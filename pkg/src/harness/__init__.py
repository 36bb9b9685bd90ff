"""Experiment harness: manifests, runs, sweeps, reports and self-checks."""

from src.harness.artifacts import load_artifact, save_artifact, stored_rounds
from src.harness.manifest import (
    ExperimentManifest,
    ManifestError,
    load_echo,
    load_manifest,
    parse_manifest,
    write_echo,
)
from src.harness.report import ReportError, collect_runs, format_table, render_report
from src.harness.runner import (
    EXIT_CODES,
    RunResult,
    RunStatus,
    attack_run,
    run_experiment,
    train_from_manifest,
)
from src.harness.selftest import CheckResult, run_selftest
from src.harness.settings import HarnessSettings
from src.harness.sweep import SweepAxis, SweepError, SweepSpec, load_sweep, run_sweep

__all__ = [
    # Settings
    "HarnessSettings",
    # Manifests
    "ExperimentManifest",
    "ManifestError",
    "parse_manifest",
    "load_manifest",
    "write_echo",
    "load_echo",
    # Runs
    "RunStatus",
    "RunResult",
    "EXIT_CODES",
    "run_experiment",
    "train_from_manifest",
    "attack_run",
    "save_artifact",
    "load_artifact",
    "stored_rounds",
    # Sweeps and reports
    "SweepAxis",
    "SweepSpec",
    "SweepError",
    "load_sweep",
    "run_sweep",
    "ReportError",
    "collect_runs",
    "format_table",
    "render_report",
    # Self-checks
    "CheckResult",
    "run_selftest",
]
