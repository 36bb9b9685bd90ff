"""Experiment manifests: one TOML file describes one run."""

import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, Field, ValidationError

from src.attack import AttackConfig
from src.data import DatasetName, DatasetSpec
from src.defense import DefenseConfig
from src.federation import CaptureSettings, FederationConfig
from src.models import ModelSpec

logger = logging.getLogger(__name__)

MANIFEST_ECHO = "manifest.json"


class ManifestError(Exception):
    """Raised when a manifest cannot be read or fails validation."""
    pass


class ExperimentManifest(BaseModel):
    """Everything needed to reproduce a run.

    Attributes:
        name: Run label used in reports.
        seed: Master seed every random stream is split from.
        output_dir: Run directory; relative paths land under the output root.
        dataset: Data source, limits and normalization.
        model: Architecture.
        federation: Round loop.
        defense: Client-side defense and its parameters.
        attack: Gradient inversion settings and captured rounds.
    """

    name: str = "run"
    seed: int = Field(default=0, ge=0)
    output_dir: Path = Path("runs/run")
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)

    def capture_settings(self) -> CaptureSettings:
        """Rounds whose artifacts the server keeps: capture rounds, attack rounds and the final one."""
        rounds = set(self.attack.capture_rounds)
        rounds.update(self.attack.attack_rounds or [])
        return CaptureSettings(
            rounds=rounds,
            final=True,
            probes_per_client=self.attack.images_per_client,
            probe_batch_size=self.attack.batch_size,
        )

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _resolve(path: Optional[Path], base: Path) -> Optional[Path]:
    if path is None or path.is_absolute():
        return path
    return (base / path).resolve()


def parse_manifest(data: Dict[str, Any], base_dir: Optional[Path] = None) -> ExperimentManifest:
    """Validate a manifest tree and check the paths it references.

    Args:
        data: Parsed TOML/JSON tree.
        base_dir: Directory relative dataset roots are resolved against.

    Raises:
        ManifestError: On validation failure or a missing dataset root.
    """
    try:
        manifest = ExperimentManifest.model_validate(data)
    except ValidationError as e:
        raise ManifestError(f"Invalid manifest: {e}") from e

    dataset = manifest.dataset
    if base_dir is not None and dataset.root is not None:
        dataset.root = _resolve(dataset.root, base_dir)
    if dataset.name != DatasetName.SYNTHETIC:
        if dataset.root is None:
            raise ManifestError(f"dataset.root is required for {dataset.name.value}")
        if not dataset.root.is_dir():
            raise ManifestError(f"dataset.root does not exist: {dataset.root}")
    return manifest


def load_manifest(path: Union[str, Path]) -> ExperimentManifest:
    """Read a ``.toml`` manifest or a ``manifest.json`` echo.

    Raises:
        ManifestError: If the file is missing, malformed or invalid.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with open(path, "rb") as f:
                data = tomllib.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, OSError) as e:
        raise ManifestError(f"Failed to parse {path}: {e}") from e
    manifest = parse_manifest(data, base_dir=path.parent)
    logger.info("Loaded manifest %s (%s, defense=%s)", path, manifest.name, manifest.defense.method.value)
    return manifest


def write_echo(manifest: ExperimentManifest, run_dir: Path) -> Path:
    """Write ``manifest.json``; sorted keys keep it byte-stable."""
    path = Path(run_dir) / MANIFEST_ECHO
    path.write_text(json.dumps(manifest.echo(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_echo(run_dir: Path) -> ExperimentManifest:
    """Read a run's ``manifest.json`` without re-checking dataset paths.

    Raises:
        ManifestError: If the echo is missing or invalid.
    """
    path = Path(run_dir) / MANIFEST_ECHO
    try:
        return ExperimentManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ManifestError(f"No manifest echo in {run_dir}: {e}") from e
    except ValidationError as e:
        raise ManifestError(f"Invalid manifest echo {path}: {e}") from e
