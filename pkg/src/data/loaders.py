"""Dataset loaders for MNIST/FashionMNIST (IDX), CIFAR-10 (binary) and synthetic blobs."""

import gzip
import logging
import struct
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.data.dataset import Dataset, DatasetError, Split
from src.data.partition import split_validation
from src.data.synthetic import load_saved_dataset, save_dataset, synth_blobs
from src.data.transforms import NormalizationMode

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

IDX_FILES = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    Split.TRAIN: [f"data_batch_{i}.bin" for i in range(1, 6)],
    Split.TEST: ["test_batch.bin"],
}


class DatasetName(str, Enum):
    """Supported datasets."""
    MNIST = "mnist"
    FMNIST = "fmnist"
    CIFAR10 = "cifar10"
    SYNTHETIC = "synthetic"


class SyntheticSpec(BaseModel):
    """Shape of a generated blob dataset."""

    classes: int = Field(default=2, ge=2)
    per_class: int = Field(default=50, ge=1)
    test_per_class: int = Field(default=20, ge=1)
    image_shape: Tuple[int, int, int] = (1, 4, 4)
    seed: int = 0


class DatasetSpec(BaseModel):
    """Where a run's data comes from and how it is trimmed and normalized."""

    name: DatasetName = DatasetName.MNIST
    root: Optional[Path] = None
    train_limit: Optional[int] = Field(default=None, ge=1)
    test_limit: Optional[int] = Field(default=None, ge=1)
    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    normalization: NormalizationMode = NormalizationMode.STANDARD
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)


def _read_bytes(path: Path) -> bytes:
    """Read a file, transparently gunzipping ``*.gz`` (or a ``.gz`` sibling)."""
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if not path.exists():
        raise DatasetError(f"File not found: {path}")
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except (OSError, EOFError) as e:
        raise DatasetError(f"Failed to read {path}: {e}") from e


def _idx_payload(raw: bytes, magic: int, dims: int, path: Path) -> Tuple[Tuple[int, ...], np.ndarray]:
    header = 4 + 4 * dims
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack_from(f">{dims}I", raw, 4)
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - header < count:
        raise DatasetError(f"{path}: truncated, header promises {count} bytes, found {len(raw) - header}")
    return shape, np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)


def load_idx(
    images_path: Path,
    labels_path: Path,
    name: str = "mnist",
    split: Split = Split.TRAIN,
) -> Dataset:
    """Load an IDX image/label file pair (gzip optional).

    Args:
        images_path: ``idx3-ubyte`` image file.
        labels_path: ``idx1-ubyte`` label file.
        name: Dataset name recorded on the result.
        split: Split tag.

    Returns:
        Dataset with images ``[n, 1, rows, cols]`` scaled by 1/255.

    Raises:
        DatasetError: On bad magic, truncation, or image/label count mismatch.
    """
    image_shape, pixels = _idx_payload(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, Path(images_path))
    label_shape, labels = _idx_payload(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, Path(labels_path))
    if image_shape[0] != label_shape[0]:
        raise DatasetError(f"{image_shape[0]} images but {label_shape[0]} labels")

    n, rows, cols = image_shape
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    logger.info("Loaded %d %s images from %s", n, name, images_path)
    return Dataset(images=images, labels=labels.astype(np.int64), name=name, split=split)


def load_cifar10(batch_files: Sequence[Path], split: Split = Split.TRAIN) -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 R,G,B plane bytes per record).

    Raises:
        DatasetError: If a file length is not a multiple of 3073.
    """
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in batch_files:
        raw = _read_bytes(Path(path))
        if len(raw) % CIFAR_RECORD != 0:
            raise DatasetError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)

    if not images:
        raise DatasetError("No CIFAR-10 batch files given")
    dataset = Dataset(
        images=np.concatenate(images), labels=np.concatenate(labels), name="cifar10", split=split
    )
    logger.info("Loaded %d cifar10 images from %d files", len(dataset), len(batch_files))
    return dataset


def _idx_split(spec: DatasetSpec, split: Split) -> Dataset:
    images_file, labels_file = IDX_FILES[split]
    return load_idx(spec.root / images_file, spec.root / labels_file, spec.name.value, split)


def _cifar_split(spec: DatasetSpec, split: Split) -> Dataset:
    root = spec.root
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    return load_cifar10([root / f for f in CIFAR_FILES[split]], split)


def _synthetic_split(spec: DatasetSpec, split: Split) -> Dataset:
    synth = spec.synthetic
    if spec.root is not None and (spec.root / split.value).is_dir():
        return load_saved_dataset(spec.root / split.value)
    # One shuffled draw for both splits so they share class centres.
    full = synth_blobs(
        synth.classes,
        synth.per_class + synth.test_per_class,
        int(np.prod(synth.image_shape)),
        synth.seed,
        image_shape=synth.image_shape,
    )
    n_train = synth.classes * synth.per_class
    indices = np.arange(n_train) if split == Split.TRAIN else np.arange(n_train, len(full))
    return full.subset(indices, split=split)


def load_split(spec: DatasetSpec, split: Split) -> Dataset:
    """Load one split of the dataset named by ``spec``."""
    loaders = {
        DatasetName.MNIST: _idx_split,
        DatasetName.FMNIST: _idx_split,
        DatasetName.CIFAR10: _cifar_split,
        DatasetName.SYNTHETIC: _synthetic_split,
    }
    if spec.name != DatasetName.SYNTHETIC and spec.root is None:
        raise DatasetError(f"Dataset {spec.name.value} needs a root directory")
    return loaders[spec.name](spec, split)


def load_dataset(spec: DatasetSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Load ``(train, val, test)``: limits first, then the validation tail split."""
    train = load_split(spec, Split.TRAIN)
    test = load_split(spec, Split.TEST)
    if spec.train_limit is not None:
        train = train.head(spec.train_limit)
    if spec.test_limit is not None:
        test = test.head(spec.test_limit)
    train, val = split_validation(train, spec.validation_fraction)
    return train, val, test


def persist_synthetic(spec: DatasetSpec, directory: Path) -> None:
    """Save both synthetic splits as tensor blobs under ``directory``."""
    for split in (Split.TRAIN, Split.TEST):
        save_dataset(directory / split.value, load_split(spec, split))
