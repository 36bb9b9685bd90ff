"""Client-side defenses: error-minimizing perturbation and local gradient noise."""

from src.defense.fedem import (
    PIXEL_SCALE,
    PerturbationConfig,
    PerturbationError,
    PerturbationResult,
    PerturbationState,
    client_gradient,
    generate_perturbation,
    init_delta,
    perturb,
    project_annulus,
)
from src.defense.ldp import (
    GaussianSampler,
    LaplaceSampler,
    NoiseMechanism,
    NoiseSpec,
    add_noise,
    build_sampler,
    clip_gradient,
    privatize,
)
from src.defense.strategy import (
    ClientUpload,
    Defense,
    DefenseConfig,
    DefenseMethod,
    FedEMDefense,
    NoDefense,
    NoiseDefense,
    build_defense,
    sample_batch,
)

__all__ = [
    # FedEM
    "PIXEL_SCALE",
    "PerturbationConfig",
    "PerturbationState",
    "PerturbationResult",
    "PerturbationError",
    "init_delta",
    "project_annulus",
    "perturb",
    "generate_perturbation",
    "client_gradient",
    # LDP
    "NoiseMechanism",
    "NoiseSpec",
    "GaussianSampler",
    "LaplaceSampler",
    "build_sampler",
    "clip_gradient",
    "add_noise",
    "privatize",
    # Strategies
    "DefenseMethod",
    "DefenseConfig",
    "ClientUpload",
    "Defense",
    "NoDefense",
    "FedEMDefense",
    "NoiseDefense",
    "build_defense",
    "sample_batch",
]
