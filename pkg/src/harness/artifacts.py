"""On-disk round artifacts, so attacks can re-run without retraining.

Layout of ``rounds/round_XXXX/``::

    meta.json                        round, clients, upload index
    theta.ckpt                       global model the round started from
    upload_c{k}_s{slot}_{part}.bin   images, labels, gradient, inputs, delta

Slot 0 is the client's training upload; probes use slots 1 and up.
"""

import json
from pathlib import Path
from typing import List

import numpy as np

from src.federation import CapturedUpload, RoundArtifact
from src.models import (
    GradientVector,
    ModelSpec,
    ParameterSet,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)

ROUNDS_DIR = "rounds"


def round_dir(run_dir: Path, round_index: int) -> Path:
    return Path(run_dir) / ROUNDS_DIR / f"round_{round_index:04d}"


def stored_rounds(run_dir: Path) -> List[int]:
    """Round indices with a persisted artifact, ascending."""
    root = Path(run_dir) / ROUNDS_DIR
    if not root.is_dir():
        return []
    return sorted(int(p.name.split("_")[1]) for p in root.glob("round_*") if (p / "meta.json").exists())


def _save_upload(directory: Path, upload: CapturedUpload) -> dict:
    stem = directory / f"upload_c{upload.client_id}_s{upload.slot}"
    save_tensor(f"{stem}_images.bin", upload.images)
    save_tensor(f"{stem}_labels.bin", np.asarray(upload.labels, dtype=np.float64))
    save_tensor(f"{stem}_gradient.bin", upload.gradient.flatten())
    save_tensor(f"{stem}_inputs.bin", upload.inputs)
    if upload.delta is not None:
        save_tensor(f"{stem}_delta.bin", upload.delta)
    return {"client_id": upload.client_id, "slot": upload.slot, "delta": upload.delta is not None}


def _load_upload(directory: Path, theta: ParameterSet, entry: dict) -> CapturedUpload:
    stem = directory / f"upload_c{entry['client_id']}_s{entry['slot']}"
    return CapturedUpload(
        client_id=entry["client_id"],
        slot=entry["slot"],
        images=load_tensor(f"{stem}_images.bin"),
        labels=load_tensor(f"{stem}_labels.bin").astype(np.int64),
        gradient=GradientVector.from_flat(theta, load_tensor(f"{stem}_gradient.bin")),
        inputs=load_tensor(f"{stem}_inputs.bin"),
        delta=load_tensor(f"{stem}_delta.bin") if entry["delta"] else None,
    )


def save_artifact(run_dir: Path, spec: ModelSpec, artifact: RoundArtifact) -> Path:
    directory = round_dir(run_dir, artifact.round)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / "theta.ckpt", spec, artifact.theta)
    uploads = [_save_upload(directory, artifact.uploads[k]) for k in sorted(artifact.uploads)]
    probes = [_save_upload(directory, probe) for probe in artifact.probes]
    meta = {"round": artifact.round, "clients": artifact.clients, "uploads": uploads, "probes": probes}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return directory


def load_artifact(run_dir: Path, round_index: int) -> RoundArtifact:
    """Inverse of ``save_artifact``.

    Raises:
        FileNotFoundError: If the round was not captured.
    """
    directory = round_dir(run_dir, round_index)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"No artifact for round {round_index} in {run_dir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    _, theta = load_checkpoint(directory / "theta.ckpt")
    uploads = {entry["client_id"]: _load_upload(directory, theta, entry) for entry in meta["uploads"]}
    probes = [_load_upload(directory, theta, entry) for entry in meta["probes"]]
    return RoundArtifact(round=meta["round"], theta=theta, clients=meta["clients"], uploads=uploads, probes=probes)
