"""Gaussian-blob datasets for fast runs, and their on-disk form."""

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.data.dataset import Dataset, DatasetError, Split
from src.models.checkpoint import load_tensor, save_tensor

MIN_CENTER_DISTANCE = 10.0
MAX_NOISE_NORM = 3.0


def _centers(rng: np.random.Generator, classes: int, dims: int) -> np.ndarray:
    """Rejection-sample class centres pairwise at least ``MIN_CENTER_DISTANCE`` apart."""
    half_width = MIN_CENTER_DISTANCE * classes
    centers = [rng.uniform(-half_width, half_width, size=dims)]
    while len(centers) < classes:
        candidate = rng.uniform(-half_width, half_width, size=dims)
        if min(np.linalg.norm(candidate - c) for c in centers) >= MIN_CENTER_DISTANCE:
            centers.append(candidate)
    return np.stack(centers)


def synth_blobs(
    classes: int,
    per_class: int,
    dims: int,
    seed: int,
    image_shape: Optional[Tuple[int, int, int]] = None,
) -> Dataset:
    """Linearly separable Gaussian blobs, rescaled into ``[0, 1]``.

    Every sample lies within ``MAX_NOISE_NORM`` of its class centre and
    centres are ``MIN_CENTER_DISTANCE`` apart, so classes keep a positive
    margin; the global affine rescaling preserves it.

    Args:
        classes: Number of classes (>= 2).
        per_class: Samples per class.
        dims: Feature count (>= 2).
        seed: Generator seed.
        image_shape: ``(C, H, W)`` with ``C*H*W == dims``; defaults to ``(1, 1, dims)``.

    Returns:
        Shuffled Dataset named ``synthetic``.
    """
    if dims < 2:
        raise DatasetError(f"synth_blobs needs dims >= 2, got {dims}")
    image_shape = tuple(image_shape) if image_shape is not None else (1, 1, dims)
    if int(np.prod(image_shape)) != dims:
        raise DatasetError(f"image shape {image_shape} does not hold {dims} features")

    rng = np.random.default_rng(seed)
    centers = _centers(rng, classes, dims)
    noise = rng.normal(scale=MAX_NOISE_NORM / np.sqrt(dims), size=(classes * per_class, dims))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise = noise * np.minimum(1.0, MAX_NOISE_NORM / np.maximum(norms, 1e-300))

    labels = np.repeat(np.arange(classes), per_class)
    points = centers[labels] + noise
    low, high = points.min(), points.max()
    points = (points - low) / (high - low)

    order = rng.permutation(len(labels))
    return Dataset(
        images=np.clip(points[order], 0.0, 1.0).reshape(-1, *image_shape),
        labels=labels[order],
        name="synthetic",
        num_classes=classes,
    )


def save_dataset(directory: Path, dataset: Dataset) -> Path:
    """Write ``images.bin`` and ``labels.bin`` tensor blobs."""
    directory = Path(directory)
    save_tensor(directory / "images.bin", dataset.images)
    save_tensor(directory / "labels.bin", dataset.labels.astype(np.float64))
    (directory / "meta.txt").write_text(
        f"{dataset.name}\n{dataset.split.value}\n{dataset.num_classes}\n", encoding="utf-8"
    )
    return directory


def load_saved_dataset(directory: Path) -> Dataset:
    """Inverse of ``save_dataset``."""
    directory = Path(directory)
    meta = directory / "meta.txt"
    if not meta.exists():
        raise DatasetError(f"No saved dataset in {directory}")
    name, split, num_classes = meta.read_text(encoding="utf-8").split()
    return Dataset(
        images=load_tensor(directory / "images.bin"),
        labels=load_tensor(directory / "labels.bin").astype(np.int64),
        name=name,
        split=Split(split),
        num_classes=int(num_classes),
    )
