"""Comparison tables across finished runs."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from src.evaluation import METRIC_COLUMNS
from src.harness.runner import METRICS_CSV, RunStatus, read_status

logger = logging.getLogger(__name__)

MISSING = "n/a"
REPORT_COLUMNS = ["dataset", "method", "name"] + METRIC_COLUMNS
REPORT_TXT = "report.txt"
REPORT_CSV = "report.csv"


class ReportError(Exception):
    """Raised when no usable run is found."""
    pass


def _load_row(run_dir: Path) -> Optional[pd.DataFrame]:
    status = read_status(run_dir)
    metrics = Path(run_dir) / METRICS_CSV
    if status is None or status.get("status") != RunStatus.OK or not metrics.exists():
        logger.warning("Skipping incomplete run %s", run_dir)
        return None
    frame = pd.read_csv(metrics)
    for column in REPORT_COLUMNS:
        if column not in frame.columns:
            logger.warning("%s: metric column %s missing; filled with %s", run_dir, column, MISSING)
            frame[column] = MISSING
    return frame


def collect_runs(run_dirs: Sequence[Path]) -> pd.DataFrame:
    """One row per completed run, ordered by (dataset, method, name).

    Metric columns missing from a run are filled with the ``n/a`` sentinel.

    Raises:
        ReportError: If none of the directories holds a completed run.
    """
    frames = [f for f in (_load_row(Path(d)) for d in run_dirs) if f is not None]
    if not frames:
        raise ReportError("No completed runs to report")
    table = pd.concat(frames, ignore_index=True)
    subset = table[REPORT_COLUMNS].astype(object)
    table[REPORT_COLUMNS] = subset.where(subset.notna(), MISSING)
    return table.sort_values(["dataset", "method", "name"], kind="stable")[REPORT_COLUMNS].reset_index(drop=True)


def format_table(table: pd.DataFrame) -> str:
    """Aligned plain text with four decimals for metrics."""
    def fmt(value):
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    return table.to_string(index=False, formatters={c: fmt for c in METRIC_COLUMNS}) + "\n"


def render_report(run_dirs: Sequence[Path], output_dir: Path) -> List[Path]:
    """Write ``report.txt`` and ``report.csv`` comparing ``run_dirs``.

    Returns:
        The two written paths.
    """
    table = collect_runs(run_dirs)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    txt_path = output_dir / REPORT_TXT
    csv_path = output_dir / REPORT_CSV
    txt_path.write_text(format_table(table), encoding="utf-8")
    table.to_csv(csv_path, index=False, float_format="%.10g")
    logger.info("Report of %d runs written to %s", len(table), output_dir)
    return [txt_path, csv_path]
