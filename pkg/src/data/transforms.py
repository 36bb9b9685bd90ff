"""Normalization t(.) applied to (possibly perturbed) images before the model."""

from enum import Enum
from typing import Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from src.autodiff import Graph, Node, Tensor

# Standard published per-channel statistics.
STANDARD_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "fmnist": ((0.2860,), (0.3530,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


class NormalizationMode(str, Enum):
    """Which transform a run applies."""
    STANDARD = "standard"
    IDENTITY = "identity"


class NormalizationTransform(BaseModel):
    """Per-channel ``(x - mean) / std`` after clamping to ``[0, 1]``."""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @field_validator("std")
    @classmethod
    def _positive_std(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(s <= 0 for s in v):
            raise ValueError("std must be positive per channel")
        return v

    @model_validator(mode="after")
    def _same_channels(self) -> "NormalizationTransform":
        if len(self.mean) != len(self.std) or not self.mean:
            raise ValueError("mean and std need one entry per channel")
        return self

    @property
    def channels(self) -> int:
        return len(self.mean)

    @classmethod
    def identity(cls, channels: int = 1) -> "NormalizationTransform":
        return cls(mean=(0.0,) * channels, std=(1.0,) * channels)

    @classmethod
    def for_dataset(
        cls, name: str, channels: int, mode: NormalizationMode = NormalizationMode.STANDARD
    ) -> "NormalizationTransform":
        """Standard statistics for known datasets, identity otherwise."""
        if mode == NormalizationMode.IDENTITY or name not in STANDARD_STATS:
            return cls.identity(channels)
        mean, std = STANDARD_STATS[name]
        return cls(mean=mean, std=std)

    def _channel_view(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        shape = (self.channels, 1, 1)
        return np.array(self.mean).reshape(shape), np.array(self.std).reshape(shape)


def normalize(t: NormalizationTransform, x: Tensor) -> Tensor:
    """Clamp to ``[0, 1]`` then standardise per channel.

    Accepts ``[C, H, W]`` or ``[n, C, H, W]``.
    """
    mean, std = t._channel_view(x)
    return (np.clip(x, 0.0, 1.0) - mean) / std


def denormalize(t: NormalizationTransform, z: Tensor, clip: bool = True) -> Tensor:
    """Inverse of ``normalize`` on the clamped region."""
    mean, std = t._channel_view(z)
    x = np.asarray(z) * std + mean
    return np.clip(x, 0.0, 1.0) if clip else x


def _expand(values: Tuple[float, ...], rows: int, image_shape: Tuple[int, int, int]) -> Tensor:
    _, height, width = image_shape
    per_pixel = np.repeat(np.asarray(values, dtype=np.float64), height * width)
    return np.tile(per_pixel, (rows, 1))


def normalize_node(
    graph: Graph,
    t: NormalizationTransform,
    x: Node,
    image_shape: Tuple[int, int, int],
) -> Node:
    """Differentiable ``normalize`` for flattened ``[n, C*H*W]`` inputs."""
    clamped = graph.clamp(x, 0.0, 1.0)
    rows = x.shape[0]
    if len(set(t.mean)) == 1 and len(set(t.std)) == 1:
        return graph.scale(clamped, 1.0 / t.std[0], -t.mean[0] / t.std[0])
    mean = graph.constant(_expand(t.mean, rows, image_shape))
    inv_std = graph.constant(1.0 / _expand(t.std, rows, image_shape))
    return graph.mul(graph.sub(clamped, mean), inv_std)
