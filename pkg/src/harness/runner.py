"""End-to-end runs: train, capture, attack, score and persist."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from src.attack import AttackError, AttackOutcome, attack_round, export_round
from src.autodiff import AutodiffError
from src.data import (
    DatasetError,
    DatasetName,
    NormalizationTransform,
    denormalize,
    load_dataset,
    normalize,
    partition_iid,
    persist_synthetic,
)
from src.defense import ClientUpload, PerturbationError, build_defense
from src.evaluation import (
    METRIC_COLUMNS,
    ExperimentTracker,
    ImageScores,
    MetricError,
    MetricReport,
    feature_mse,
    mse,
    psnr,
    ssim,
    summarize,
)
from src.federation import (
    ClientAbortError,
    Federation,
    FederationError,
    RecordStream,
    RoundRecord,
    SeedStreams,
)
from src.harness.artifacts import load_artifact, save_artifact, stored_rounds
from src.harness.manifest import ExperimentManifest, ManifestError, load_echo, load_manifest, write_echo
from src.harness.settings import HarnessSettings
from src.models import CheckpointError, Model, ModelError, ParameterSet, load_checkpoint, save_checkpoint, save_tensor

logger = logging.getLogger(__name__)

STATUS_FILE = "status.json"
ROUNDS_CSV = "rounds.csv"
METRICS_CSV = "metrics.csv"
IMAGES_CSV = "images.csv"
IMAGES_DIR = "images"
CHECKPOINT = "model.ckpt"

RUN_COLUMNS = ["name", "dataset", "method"] + METRIC_COLUMNS + ["images"]
IMAGE_COLUMNS = ["round", "client_id", "slot", "index", "label", "mse", "fea_mse", "ssim", "psnr", "matching_loss"]


class RunStatus:
    OK = "ok"
    CONFIG_ERROR = "config-error"
    DATASET_ERROR = "dataset-error"
    RUNTIME_ERROR = "runtime-error"


EXIT_CODES = {
    RunStatus.OK: 0,
    RunStatus.CONFIG_ERROR: 1,
    RunStatus.DATASET_ERROR: 1,
    RunStatus.RUNTIME_ERROR: 2,
}

RUNTIME_ERRORS = (
    FederationError,
    PerturbationError,
    AttackError,
    AutodiffError,
    ModelError,
    MetricError,
    CheckpointError,
)


@dataclass
class RunResult:
    """Where a run went and how it ended."""

    run_dir: Path
    status: str
    report: Optional[MetricReport] = None
    error: Optional[str] = None
    details: Dict[str, object] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "exit_code": self.exit_code,
            "error": self.error,
            **self.details,
        }


def resolve_run_dir(manifest: ExperimentManifest, settings: HarnessSettings) -> Path:
    """``output_dir`` as given, or under ``settings.output_root`` when relative."""
    if manifest.output_dir.is_absolute() or settings.output_root is None:
        return manifest.output_dir
    return settings.output_root / manifest.output_dir


def write_status(run_dir: Path, result: RunResult) -> Path:
    path = Path(run_dir) / STATUS_FILE
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_status(run_dir: Path) -> Optional[dict]:
    path = Path(run_dir) / STATUS_FILE
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def score_outcomes(
    outcomes: Dict[int, List[AttackOutcome]],
    model: Model,
    theta: ParameterSet,
    transform: NormalizationTransform,
) -> List[ImageScores]:
    """Per-image privacy metrics of one attacked round.

    Pixel metrics compare de-normalized reconstructions with the raw client
    images; feature MSE compares both as model inputs under ``theta``.
    """
    scores = []
    for client_id in sorted(outcomes):
        index = 0
        for outcome in outcomes[client_id]:
            recon_inputs = outcome.result.x_hat
            recon_pixels = denormalize(transform, recon_inputs)
            original_inputs = normalize(transform, outcome.originals)
            for i, original in enumerate(outcome.originals):
                scores.append(
                    ImageScores(
                        client_id=client_id,
                        index=index,
                        mse=mse(original, recon_pixels[i]),
                        fea_mse=feature_mse(model, theta, original_inputs[i:i + 1], recon_inputs[i:i + 1]),
                        ssim=ssim(original, recon_pixels[i]),
                        psnr=psnr(original, recon_pixels[i]),
                        matching_loss=outcome.result.loss,
                        extra={"round": outcome.round, "slot": outcome.slot, "label": int(outcome.labels[i])},
                    )
                )
                index += 1
    return scores


def _attack_rounds(manifest: ExperimentManifest, available: Sequence[int], final_round: int) -> List[int]:
    wanted = manifest.attack.attack_rounds or [final_round]
    missing = [r for r in wanted if r not in available]
    if missing:
        logger.warning("Rounds %s were not captured; skipping them", missing)
    return [r for r in wanted if r in available]


def write_metrics(run_dir: Path, manifest: ExperimentManifest, report: MetricReport, scores: List[ImageScores]) -> None:
    """``metrics.csv`` (one row, table layout) and ``images.csv`` (one row per image)."""
    row = {
        "name": manifest.name,
        "dataset": manifest.dataset.name.value,
        "method": manifest.defense.method.value,
        **report.to_dict(),
    }
    pd.DataFrame([row], columns=RUN_COLUMNS).to_csv(
        Path(run_dir) / METRICS_CSV, index=False, float_format="%.10g"
    )
    pd.DataFrame([s.to_dict() for s in scores], columns=IMAGE_COLUMNS).to_csv(
        Path(run_dir) / IMAGES_CSV, index=False, float_format="%.10g"
    )


def run_attacks(
    run_dir: Path,
    manifest: ExperimentManifest,
    model: Model,
    theta_final: ParameterSet,
    transform: NormalizationTransform,
    rounds: Sequence[int],
    progress: bool = False,
) -> List[ImageScores]:
    """Attack the stored artifacts of ``rounds`` and dump the reconstructions."""
    streams = SeedStreams(manifest.seed)
    scores: List[ImageScores] = []
    for r in rounds:
        artifact = load_artifact(run_dir, r)
        outcomes = attack_round(artifact, model, manifest.attack, streams, progress=progress)
        export_round(outcomes, transform, Path(run_dir) / IMAGES_DIR)
        scores.extend(score_outcomes(outcomes, model, theta_final, transform))
    return scores


def _delta_dumper(run_dir: Path):
    def dump(record: RoundRecord, uploads: Dict[int, ClientUpload]) -> None:
        for k, upload in uploads.items():
            if upload.delta is not None:
                save_tensor(Path(run_dir) / "deltas" / f"round_{record.round:04d}" / f"client_{k}.bin", upload.delta)
    return dump


def _train_and_attack(
    manifest: ExperimentManifest,
    run_dir: Path,
    settings: HarnessSettings,
    tracker: Optional[ExperimentTracker],
) -> RunResult:
    spec = manifest.dataset
    train, val, test = load_dataset(spec)
    if spec.name == DatasetName.SYNTHETIC:
        persist_synthetic(spec, run_dir / "data")

    streams = SeedStreams(manifest.seed)
    model = Model(manifest.model)
    transform = NormalizationTransform.for_dataset(spec.name.value, train.image_shape[0], spec.normalization)
    shards = partition_iid(train, manifest.federation.num_clients, streams.generator("partition"))
    config = manifest.federation
    if settings.workers is not None:
        config = config.model_copy(update={"workers": settings.workers})

    federation = Federation(
        config,
        model,
        build_defense(manifest.defense, model, transform, streams),
        train,
        shards,
        val,
        test,
        transform,
        streams,
        record_wall_time=settings.record_wall_time,
        progress=settings.progress,
    )

    hooks = []
    if manifest.defense.fedem.dump_delta:
        hooks.append(_delta_dumper(run_dir))
    if tracker is not None:
        hooks.append(lambda record, uploads: tracker.log_round(record))

    def on_round(record, uploads):
        for hook in hooks:
            hook(record, uploads)

    theta0 = model.init_params(streams.seed("init"))
    result = federation.train(
        theta0,
        stream=RecordStream(run_dir / ROUNDS_CSV),
        capture=manifest.capture_settings(),
        on_round=on_round,
    )
    save_checkpoint(run_dir / CHECKPOINT, manifest.model, result.theta)
    for artifact in result.artifacts.values():
        save_artifact(run_dir, manifest.model, artifact)

    val_acc, test_acc = federation.evaluate(result.theta)
    scores: List[ImageScores] = []
    if manifest.attack.enabled and result.records:
        rounds = _attack_rounds(manifest, sorted(result.artifacts), result.records[-1].round)
        scores = run_attacks(run_dir, manifest, model, result.theta, transform, rounds, settings.progress)

    report = summarize(test_acc, val_acc, scores)
    write_metrics(run_dir, manifest, report, scores)
    details = {
        **result.to_dict(),
        "test_acc": test_acc,
        "val_acc": val_acc,
    }
    return RunResult(run_dir=run_dir, status=RunStatus.OK, report=report, details=details)


def run_experiment(manifest: ExperimentManifest, settings: Optional[HarnessSettings] = None) -> RunResult:
    """Run one manifest end to end and write its run directory.

    The directory holds ``manifest.json``, ``rounds.csv``, ``metrics.csv``,
    ``images.csv``, ``images/``, ``model.ckpt``, ``rounds/`` and ``status.json``.
    Module errors are caught and recorded in ``status.json``.

    Args:
        manifest: Validated manifest.
        settings: Harness settings; loaded from the environment when omitted.

    Returns:
        RunResult whose ``exit_code`` is 0 (ok), 1 (config/dataset error) or 2 (runtime error).
    """
    settings = settings or HarnessSettings()
    run_dir = resolve_run_dir(manifest, settings)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_echo(manifest, run_dir)

    tracker = None
    if settings.track_mlflow:
        tracker = ExperimentTracker(settings.mlflow_experiment, settings.mlflow_tracking_uri)
        tracker.start_run(run_name=manifest.name, tags={"method": manifest.defense.method.value})
        tracker.log_manifest(manifest.echo())

    result = RunResult(run_dir, RunStatus.RUNTIME_ERROR, error="interrupted")
    try:
        result = _train_and_attack(manifest, run_dir, settings, tracker)
    except DatasetError as e:
        logger.error("Dataset error: %s", e)
        result = RunResult(run_dir, RunStatus.DATASET_ERROR, error=str(e))
    except ClientAbortError as e:
        logger.error("Runtime error: %s", e)
        result = RunResult(run_dir, RunStatus.RUNTIME_ERROR, error=str(e))
    except FederationError as e:
        # Dataset/model mismatches are rejected before round 1.
        logger.error("Configuration error: %s", e)
        result = RunResult(run_dir, RunStatus.CONFIG_ERROR, error=str(e))
    except RUNTIME_ERRORS as e:
        logger.error("Runtime error: %s", e)
        result = RunResult(run_dir, RunStatus.RUNTIME_ERROR, error=str(e))
    except Exception as e:
        logger.exception("Unexpected error in run %s", run_dir)
        result = RunResult(run_dir, RunStatus.RUNTIME_ERROR, error=f"{type(e).__name__}: {e}")
    finally:
        write_status(run_dir, result)
        if tracker is not None:
            try:
                if result.report is not None:
                    tracker.log_report(result.report)
                tracker.log_run_directory(run_dir)
            finally:
                tracker.end_run("FINISHED" if result.status == RunStatus.OK else "FAILED")
    logger.info("Run %s finished with status %s", run_dir, result.status)
    return result


def train_from_manifest(path: Path, settings: Optional[HarnessSettings] = None) -> RunResult:
    """Load a manifest file and run it; manifest errors become a config-error result."""
    settings = settings or HarnessSettings()
    try:
        manifest = load_manifest(path)
    except ManifestError as e:
        logger.error("%s", e)
        return RunResult(run_dir=Path(path).parent, status=RunStatus.CONFIG_ERROR, error=str(e))
    return run_experiment(manifest, settings)


def attack_run(run_dir: Path, round_index: Optional[int] = None, settings: Optional[HarnessSettings] = None) -> RunResult:
    """Re-attack a finished run from its persisted artifacts.

    Uses the manifest echo and ``model.ckpt``; rewrites ``metrics.csv``,
    ``images.csv`` and the dumps. Without ``round_index`` the manifest's
    attack rounds (default: last captured round) are attacked.
    """
    settings = settings or HarnessSettings()
    run_dir = Path(run_dir)
    try:
        manifest = load_echo(run_dir)
    except ManifestError as e:
        logger.error("%s", e)
        return RunResult(run_dir, RunStatus.CONFIG_ERROR, error=str(e))

    status = read_status(run_dir) or {}
    available = stored_rounds(run_dir)
    if round_index is not None:
        rounds = [round_index] if round_index in available else []
    else:
        rounds = _attack_rounds(manifest, available, available[-1]) if available else []
    if not rounds:
        error = f"No stored artifact for round {round_index if round_index is not None else 'final'}"
        logger.error(error)
        return RunResult(run_dir, RunStatus.CONFIG_ERROR, error=error)

    try:
        _, theta = load_checkpoint(run_dir / CHECKPOINT)
        model = Model(manifest.model)
        channels = manifest.model.input_shape[0]
        transform = NormalizationTransform.for_dataset(
            manifest.dataset.name.value, channels, manifest.dataset.normalization
        )
        scores = run_attacks(run_dir, manifest, model, theta, transform, rounds, settings.progress)
    except RUNTIME_ERRORS as e:
        logger.error("Attack failed: %s", e)
        return RunResult(run_dir, RunStatus.RUNTIME_ERROR, error=str(e))
    except Exception as e:
        logger.exception("Unexpected error attacking %s", run_dir)
        return RunResult(run_dir, RunStatus.RUNTIME_ERROR, error=f"{type(e).__name__}: {e}")

    report = summarize(status.get("test_acc", math.nan), status.get("val_acc", math.nan), scores)
    write_metrics(run_dir, manifest, report, scores)
    logger.info("Attacked rounds %s of %s: mean mse %.4g", rounds, run_dir, report.test_mse)
    return RunResult(run_dir, RunStatus.OK, report=report, details={"attacked_rounds": rounds})
