"""One-axis parameter sweeps over a base manifest."""

import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd
from pydantic import BaseModel, Field, ValidationError
from tqdm import tqdm

from src.evaluation import METRIC_COLUMNS
from src.harness.manifest import ExperimentManifest, ManifestError, load_manifest, parse_manifest
from src.harness.runner import RunStatus, run_experiment
from src.harness.settings import HarnessSettings

logger = logging.getLogger(__name__)

SweepValue = Union[int, float, str]

SWEEP_CSV = "sweep.csv"
TRADEOFF_CSV = "tradeoff.csv"
SWEEP_COLUMNS = ["value", "name", "dataset", "method", "status"] + METRIC_COLUMNS + ["images"]


class SweepError(Exception):
    """Raised when a sweep specification is invalid."""
    pass


class SweepAxis(str, Enum):
    """Manifest field a sweep varies."""
    PERTURB_ITERATIONS = "perturb-iterations"
    RHO_MIN = "rho-min"
    RHO_MAX = "rho-max"
    METHOD = "method"
    NOISE_SCALE = "noise-scale"


# Dotted manifest path each axis writes to.
AXIS_FIELDS = {
    SweepAxis.PERTURB_ITERATIONS: ("defense", "fedem", "iterations"),
    SweepAxis.RHO_MIN: ("defense", "fedem", "rho_min"),
    SweepAxis.RHO_MAX: ("defense", "fedem", "rho_max"),
    SweepAxis.METHOD: ("defense", "method"),
    SweepAxis.NOISE_SCALE: ("defense", "noise", "scale"),
}

# Fields a table varies; a sweep base must set them explicitly.
EXPLICIT_FIELDS = [
    ("defense", "method"),
    ("defense", "fedem", "iterations"),
    ("defense", "fedem", "rho_min"),
]


class SweepSpec(BaseModel):
    """A base manifest, one axis and the values it takes.

    Attributes:
        axis: Field to vary.
        values: Non-empty list of axis values.
        base: Manifest every run starts from.
        output_dir: Sweep directory; one run directory per value inside it.
        processes: Values run in parallel processes when greater than 1.
    """

    axis: SweepAxis
    values: List[SweepValue] = Field(min_length=1)
    base: ExperimentManifest
    output_dir: Path = Path("runs/sweep")
    processes: int = Field(default=1, ge=1)


@dataclass
class SweepResult:
    """Combined rows plus the files they were written to."""

    rows: pd.DataFrame
    csv_path: Path
    tradeoff_path: Path

    @property
    def failures(self) -> int:
        return int((self.rows["status"] != RunStatus.OK).sum())


def _is_set(model: BaseModel, path: Tuple[str, ...]) -> bool:
    node = model
    for key in path:
        if key not in node.model_fields_set:
            return False
        node = getattr(node, key)
    return True


def check_explicit(base: ExperimentManifest, axis: SweepAxis) -> None:
    """Reject a base manifest that leaves a table-varied field to its default.

    Raises:
        SweepError: Naming the fields that must be set.
    """
    missing = [
        ".".join(path)
        for path in EXPLICIT_FIELDS
        if path != AXIS_FIELDS[axis] and not _is_set(base, path)
    ]
    if missing:
        raise SweepError(f"Sweep base must set {', '.join(missing)} explicitly")


def value_label(value: SweepValue) -> str:
    return f"{value:g}" if isinstance(value, float) else str(value)


def apply_axis(base: ExperimentManifest, axis: SweepAxis, value: SweepValue, output_dir: Path) -> ExperimentManifest:
    """Copy of ``base`` with the axis field set to ``value``.

    Raises:
        ManifestError: If the resulting manifest is invalid (e.g. rho_min above rho_max).
    """
    data: Dict[str, Any] = base.model_dump(mode="json")
    *parents, leaf = AXIS_FIELDS[axis]
    node = data
    for key in parents:
        node = node[key]
    node[leaf] = value
    if axis == SweepAxis.METHOD:
        # The noise mechanism follows the method; drop the one the base implied.
        data["defense"]["noise"]["mechanism"] = "none"
    data["name"] = f"{base.name}-{axis.value}={value_label(value)}"
    data["output_dir"] = str(output_dir / f"{axis.value}={value_label(value)}")
    try:
        return ExperimentManifest.model_validate(data)
    except ValidationError as e:
        raise ManifestError(f"{axis.value}={value}: {e}") from e


def load_sweep(path: Union[str, Path]) -> SweepSpec:
    """Read a sweep TOML file.

    The ``[sweep]`` table holds ``axis``, ``values``, ``output_dir`` and
    ``base``: a manifest path relative to the sweep file, or an inline table.

    Raises:
        SweepError: If the file or its base manifest is invalid.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f).get("sweep", {})
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise SweepError(f"Failed to read sweep {path}: {e}") from e

    base = data.get("base")
    try:
        if isinstance(base, str):
            data["base"] = load_manifest(path.parent / base)
        elif isinstance(base, dict):
            data["base"] = parse_manifest(base, base_dir=path.parent)
        else:
            raise SweepError(f"{path}: sweep.base must be a manifest path or table")
    except ManifestError as e:
        raise SweepError(f"{path}: invalid base manifest: {e}") from e

    try:
        spec = SweepSpec.model_validate(data)
    except ValidationError as e:
        raise SweepError(f"Invalid sweep {path}: {e}") from e
    check_explicit(spec.base, spec.axis)
    return spec


def _empty_row(value: SweepValue, manifest_name: str, base: ExperimentManifest, status: str) -> Dict[str, Any]:
    row: Dict[str, Any] = {
        "value": value,
        "name": manifest_name,
        "dataset": base.dataset.name.value,
        "method": base.defense.method.value,
        "status": status,
    }
    row.update({column: math.nan for column in METRIC_COLUMNS})
    row["images"] = 0
    return row


def _run_value(manifest: ExperimentManifest, value: SweepValue, settings: HarnessSettings) -> Dict[str, Any]:
    result = run_experiment(manifest, settings)
    row = _empty_row(value, manifest.name, manifest, result.status)
    if result.report is not None:
        row.update(result.report.to_dict())
    return row


def run_sweep(spec: SweepSpec, settings: Optional[HarnessSettings] = None) -> SweepResult:
    """Run one experiment per axis value and combine their metric rows.

    Failing values are recorded with their status and NaN metrics; the sweep
    continues. Writes ``sweep.csv`` and ``tradeoff.csv`` (value, test_acc,
    test_mse) into the sweep directory.
    """
    settings = settings or HarnessSettings()
    sweep_dir = spec.output_dir
    if not sweep_dir.is_absolute() and settings.output_root is not None:
        sweep_dir = settings.output_root / sweep_dir
    sweep_dir.mkdir(parents=True, exist_ok=True)
    # Run directories are absolute so output_root is not applied twice.
    runs_root = sweep_dir.resolve()

    rows: Dict[int, Dict[str, Any]] = {}
    jobs: Dict[int, ExperimentManifest] = {}
    for i, value in enumerate(spec.values):
        try:
            jobs[i] = apply_axis(spec.base, spec.axis, value, runs_root)
        except ManifestError as e:
            logger.warning("Sweep value %s rejected: %s", value, e)
            rows[i] = _empty_row(value, f"{spec.base.name}-{spec.axis.value}={value_label(value)}", spec.base, RunStatus.CONFIG_ERROR)

    if spec.processes > 1:
        with ProcessPoolExecutor(max_workers=spec.processes) as pool:
            futures = {i: pool.submit(_run_value, m, spec.values[i], settings) for i, m in jobs.items()}
            for i in tqdm(futures, desc=f"sweep {spec.axis.value}", disable=not settings.progress):
                rows[i] = futures[i].result()
    else:
        for i in tqdm(jobs, desc=f"sweep {spec.axis.value}", disable=not settings.progress):
            logger.info("Sweep %s = %s", spec.axis.value, spec.values[i])
            rows[i] = _run_value(jobs[i], spec.values[i], settings)

    frame = pd.DataFrame([rows[i] for i in range(len(spec.values))], columns=SWEEP_COLUMNS)
    csv_path = sweep_dir / SWEEP_CSV
    frame.to_csv(csv_path, index=False, float_format="%.10g")
    tradeoff = frame[["value", "test_acc", "test_mse"]].rename(columns={"value": spec.axis.value})
    tradeoff_path = sweep_dir / TRADEOFF_CSV
    tradeoff.to_csv(tradeoff_path, index=False, float_format="%.10g")

    result = SweepResult(rows=frame, csv_path=csv_path, tradeoff_path=tradeoff_path)
    if result.failures:
        logger.warning("%d of %d sweep values failed", result.failures, len(spec.values))
    return result
