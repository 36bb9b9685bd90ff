"""Immutable labelled image collections."""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from src.autodiff import Tensor


class DatasetError(Exception):
    """Raised when a dataset cannot be loaded or violates its invariants."""
    pass


class Split(str, Enum):
    """Role of a dataset within a run."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class Dataset:
    """Images in ``[0, 1]`` with integer labels.

    Attributes:
        images: ``[n, channels, H, W]`` float64 pixels.
        labels: ``[n]`` integer class ids.
        name: Dataset name (``mnist``, ``cifar10``, ...).
        split: Split tag.
        num_classes: Class count labels are checked against.
    """

    images: Tensor
    labels: np.ndarray
    name: str
    split: Split = Split.TRAIN
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be [n, C, H, W], got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(
                f"{self.name}: {images.shape[0]} images but {labels.shape[0]} labels"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError(f"{self.name}: pixel values outside [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"{self.name}: labels outside [0, {self.num_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", Split(self.split))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], split: Optional[Split] = None) -> "Dataset":
        """Examples at ``indices``, in that order."""
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            name=self.name,
            split=self.split if split is None else split,
            num_classes=self.num_classes,
        )

    def head(self, limit: int) -> "Dataset":
        """First ``limit`` examples (the whole set if it is shorter)."""
        if limit >= len(self):
            return self
        return self.subset(np.arange(limit))
