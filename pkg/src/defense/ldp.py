"""Local gradient noising baselines: Gaussian, Laplace and clip-then-noise.

Noise is added per client before upload. Samplers are written out
(Box-Muller and inverse-CDF) from uniform draws so a given generator state
produces the same noise on every platform.
"""

import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.autodiff import Tensor
from src.models import GradientVector

logger = logging.getLogger(__name__)

# Smallest positive double; keeps log() finite when a uniform draw is exactly 0.
_TINY = np.finfo(np.float64).tiny


class NoiseMechanism(str, Enum):
    """Distribution of per-component gradient noise."""
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    NONE = "none"


class NoiseSpec(BaseModel):
    """Noise mechanism, its scale (sigma or b) and an optional L2 clip bound C."""

    mechanism: NoiseMechanism = NoiseMechanism.NONE
    scale: float = Field(default=0.0, ge=0.0)
    clip: Optional[float] = Field(default=None, gt=0.0)


class Sampler(ABC):
    """Draws i.i.d. noise from a generator."""

    def __init__(self, scale: float):
        if scale < 0:
            raise ValueError("Noise scale must be non-negative")
        self.scale = scale

    @abstractmethod
    def sample(self, shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
        """Return noise of ``shape``."""
        pass


class GaussianSampler(Sampler):
    """N(0, sigma^2) via the Box-Muller transform."""

    def sample(self, shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = np.maximum(rng.random(pairs), _TINY)
        u2 = rng.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return self.scale * z.reshape(shape)


class LaplaceSampler(Sampler):
    """Laplace(0, b) via the inverse CDF of a centred uniform."""

    def sample(self, shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
        u = rng.random(shape) - 0.5
        tail = np.maximum(1.0 - 2.0 * np.abs(u), _TINY)
        return -self.scale * np.sign(u) * np.log(tail)


class NullSampler(Sampler):
    """No noise."""

    def sample(self, shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
        return np.zeros(shape)


SAMPLERS: Dict[NoiseMechanism, type] = {
    NoiseMechanism.GAUSSIAN: GaussianSampler,
    NoiseMechanism.LAPLACE: LaplaceSampler,
    NoiseMechanism.NONE: NullSampler,
}


def build_sampler(spec: NoiseSpec) -> Sampler:
    return SAMPLERS[spec.mechanism](spec.scale)


def clip_gradient(g: GradientVector, bound: float) -> GradientVector:
    """Scale ``g`` by ``C / ||g||_2`` when its flattened norm exceeds ``C``."""
    if bound <= 0:
        raise ValueError(f"Clip bound must be positive, got {bound}")
    norm = g.norm()
    if norm <= bound:
        return g
    factor = bound / norm
    clipped = g.scaled(factor)
    # Rounding can leave the norm a hair above the bound.
    while clipped.norm() > bound:
        factor = np.nextafter(factor, 0.0)
        clipped = g.scaled(factor)
    return clipped


def add_noise(g: GradientVector, spec: NoiseSpec, rng: np.random.Generator) -> GradientVector:
    """Add i.i.d. noise from ``spec`` to every component of ``g``.

    A zero scale (or the ``none`` mechanism) returns ``g`` itself without
    consuming the generator.
    """
    if spec.mechanism == NoiseMechanism.NONE or spec.scale == 0.0:
        return g
    noise = build_sampler(spec).sample((g.size,), rng)
    return GradientVector.from_flat(g, g.flatten() + noise)


def privatize(g: GradientVector, spec: NoiseSpec, rng: np.random.Generator) -> GradientVector:
    """Clip (when a bound is set), then add noise."""
    if spec.clip is not None:
        g = clip_gradient(g, spec.clip)
    noisy = add_noise(g, spec, rng)
    logger.debug("Privatized gradient: norm %.4g -> %.4g", g.norm(), noisy.norm())
    return noisy
