"""Client-side defenses behind one upload interface."""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.autodiff import Tensor
from src.data.transforms import NormalizationTransform, normalize
from src.defense.fedem import PerturbationConfig, PerturbationResult, client_gradient, generate_perturbation
from src.defense.ldp import NoiseMechanism, NoiseSpec, privatize
from src.models import GradientVector, Model, ParameterSet

if TYPE_CHECKING:
    from src.federation.seeds import SeedStreams

logger = logging.getLogger(__name__)


class DefenseMethod(str, Enum):
    """What a client does to its update before upload."""
    NONE = "none"
    FEDEM = "fedem"
    LDP_GAUSSIAN = "ldp-gaussian"
    LDP_LAPLACE = "ldp-laplace"
    DP_CLIP = "dp-clip"


NOISE_METHODS = {
    DefenseMethod.LDP_GAUSSIAN: NoiseMechanism.GAUSSIAN,
    DefenseMethod.LDP_LAPLACE: NoiseMechanism.LAPLACE,
    DefenseMethod.DP_CLIP: NoiseMechanism.GAUSSIAN,
}


class DefenseConfig(BaseModel):
    """Defense block of a manifest.

    For the noise methods the mechanism follows from ``method``; ``dp-clip``
    requires ``noise.clip`` and adds Gaussian noise of ``noise.scale`` after
    clipping.
    """

    method: DefenseMethod = DefenseMethod.NONE
    fedem: PerturbationConfig = Field(default_factory=PerturbationConfig)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)

    @model_validator(mode="after")
    def _noise_matches_method(self) -> "DefenseConfig":
        if self.method not in NOISE_METHODS:
            return self
        expected = NOISE_METHODS[self.method]
        if self.noise.mechanism not in (NoiseMechanism.NONE, expected):
            raise ValueError(
                f"noise.mechanism {self.noise.mechanism.value} conflicts with method {self.method.value}"
            )
        if self.method == DefenseMethod.DP_CLIP and self.noise.clip is None:
            raise ValueError("dp-clip needs noise.clip")
        self.noise = self.noise.model_copy(update={"mechanism": expected})
        return self


@dataclass
class ClientUpload:
    """What one client sends for one batch, plus local diagnostics.

    Attributes:
        client_id: k.
        gradient: The uploaded gradient g_k.
        loss: Global-model loss on the batch the gradient was taken on.
        inputs: Normalized inputs the gradient was computed on.
        num_examples: m_k for aggregation weighting.
        perturbation: FedEM generation result, if any.
    """

    client_id: int
    gradient: GradientVector
    loss: float
    inputs: Tensor
    num_examples: int
    perturbation: Optional[PerturbationResult] = None

    @property
    def delta(self) -> Optional[Tensor]:
        return None if self.perturbation is None else self.perturbation.delta


class Defense(ABC):
    """Turns a client batch into an upload under the global model theta."""

    method: DefenseMethod

    def __init__(self, model: Model, transform: NormalizationTransform, streams: SeedStreams):
        self.model = model
        self.transform = transform
        self.streams = streams

    @abstractmethod
    def upload(
        self,
        theta: ParameterSet,
        x: Tensor,
        y: Sequence[int],
        client_id: int,
        round_index: int,
        purpose: str = "train",
        slot: int = 0,
    ) -> ClientUpload:
        """Compute client ``client_id``'s upload for round ``round_index``.

        ``purpose`` and ``slot`` select the seed stream, so probe uploads never
        consume randomness belonging to training uploads.
        """
        pass

    def _plain(self, theta: ParameterSet, x: Tensor, y: Sequence[int], client_id: int) -> ClientUpload:
        inputs = normalize(self.transform, x)
        gradient, loss = self.model.gradient(theta, inputs, y)
        return ClientUpload(client_id, gradient, loss, inputs, len(y))


class NoDefense(Defense):
    """Plain FedSGD upload."""

    method = DefenseMethod.NONE

    def upload(self, theta, x, y, client_id, round_index, purpose="train", slot=0):
        return self._plain(theta, x, y, client_id)


class FedEMDefense(Defense):
    """Error-minimizing perturbation of the batch before the gradient is taken."""

    method = DefenseMethod.FEDEM

    def __init__(self, model, transform, streams, config: PerturbationConfig):
        super().__init__(model, transform, streams)
        self.config = config

    def upload(self, theta, x, y, client_id, round_index, purpose="train", slot=0):
        if self.config.server_init:
            seed = self.streams.generator(f"{purpose}/server-perturbation", round_index, client_id, slot)
        else:
            seed = self.streams.generator(f"{purpose}/perturbation", client_id, round_index, slot)
        result = generate_perturbation(
            theta, x, y, self.config, seed, self.model, self.transform, client_id=client_id
        )
        gradient, loss = client_gradient(theta, result.x_perturbed, y, self.model)
        return ClientUpload(client_id, gradient, loss, result.x_perturbed, len(y), perturbation=result)


class NoiseDefense(Defense):
    """Local noising of the gradient (optionally clipped first)."""

    def __init__(self, model, transform, streams, spec: NoiseSpec, method: DefenseMethod):
        super().__init__(model, transform, streams)
        self.spec = spec
        self.method = method

    def upload(self, theta, x, y, client_id, round_index, purpose="train", slot=0):
        plain = self._plain(theta, x, y, client_id)
        rng = self.streams.generator(f"{purpose}/noise", client_id, round_index, slot)
        plain.gradient = privatize(plain.gradient, self.spec, rng)
        return plain


def build_defense(
    config: DefenseConfig,
    model: Model,
    transform: NormalizationTransform,
    streams: SeedStreams,
) -> Defense:
    """Instantiate the defense named by ``config.method``."""
    builders: Dict[DefenseMethod, Callable[[], Defense]] = {
        DefenseMethod.NONE: lambda: NoDefense(model, transform, streams),
        DefenseMethod.FEDEM: lambda: FedEMDefense(model, transform, streams, config.fedem),
    }
    for method in NOISE_METHODS:
        builders[method] = lambda m=method: NoiseDefense(model, transform, streams, config.noise, m)
    defense = builders[config.method]()
    logger.info("Client defense: %s", config.method.value)
    return defense


def sample_batch(
    indices: np.ndarray, batch_size: Optional[int], rng: np.random.Generator
) -> np.ndarray:
    """Random subset of a shard's indices (the whole shard when ``batch_size`` is unset)."""
    if batch_size is None or batch_size >= len(indices):
        return np.asarray(indices)
    return np.sort(rng.choice(np.asarray(indices), size=batch_size, replace=False))
