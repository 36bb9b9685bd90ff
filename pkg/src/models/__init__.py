"""Predictive models, parameter collections and checkpoint I/O."""

from src.models.architectures import (
    Activation,
    Architecture,
    Model,
    ModelSpec,
    flatten_batch,
    forward_loss,
    init_params,
    penultimate_features,
)
from src.models.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)
from src.models.parameters import GradientVector, ModelError, NamedTensors, ParameterSet

__all__ = [
    # Architectures
    "Architecture",
    "Activation",
    "ModelSpec",
    "Model",
    "flatten_batch",
    "init_params",
    "forward_loss",
    "penultimate_features",
    # Parameters
    "NamedTensors",
    "ParameterSet",
    "GradientVector",
    "ModelError",
    # Checkpoints
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "save_tensor",
    "load_tensor",
]
