"""Error-minimizing defensive perturbations.

Each client perturbs its batch with an l-infinity bounded delta that *lowers*
the training loss: N alternating steps of sign-gradient descent on delta
(projected onto the annulus ``rho_min <= ||delta||_inf <= rho_max``) and SGD
on a private copy theta_u of the global model. Radii are in pixel units out
of 255; inputs live on the ``[0, 1]`` scale, so delta enters as ``delta / 255``.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.autodiff import Graph, NonFiniteError, Tensor
from src.data.transforms import NormalizationTransform, normalize, normalize_node
from src.models import GradientVector, Model, ParameterSet

logger = logging.getLogger(__name__)

PIXEL_SCALE = 255.0

SeedLike = Union[int, np.random.Generator]


class PerturbationError(Exception):
    """Raised when perturbation generation hits a non-finite loss."""

    def __init__(self, message: str, client_id: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.client_id = client_id
        self.step = step


class PerturbationConfig(BaseModel):
    """Generation hyperparameters.

    Attributes:
        rho_max: Outer l-infinity radius, pixel units (8 means 8/255).
        rho_min: Inner radius, ``0 <= rho_min <= rho_max``.
        alpha_u: Sign-step size; ``None`` means ``rho_max / 4``.
        iterations: N alternating steps.
        eta_u: Learning rate of the theta_u co-training step.
        server_init: Draw the initial delta from the server's seed stream
            (replicates server-side initialization).
        dump_delta: Persist every client's delta per round.
    """

    rho_max: float = Field(default=8.0, ge=0.0)
    rho_min: float = Field(default=0.0, ge=0.0)
    alpha_u: Optional[float] = Field(default=None, gt=0.0)
    iterations: int = Field(default=5, ge=1)
    eta_u: float = Field(default=0.01, ge=0.0)
    server_init: bool = False
    dump_delta: bool = False

    @model_validator(mode="after")
    def _ordered_radii(self) -> "PerturbationConfig":
        if self.rho_min > self.rho_max:
            raise ValueError(f"rho_min {self.rho_min} exceeds rho_max {self.rho_max}")
        return self

    @property
    def step_size(self) -> float:
        return self.alpha_u if self.alpha_u is not None else self.rho_max / 4.0


@dataclass
class PerturbationState:
    """delta (pixel units, shaped like the batch) and its generation step."""

    delta: Tensor
    step: int = 0


@dataclass
class PerturbationResult:
    """Outcome of one client's generation.

    Attributes:
        initial_delta: delta after initialization and projection.
        delta: Final delta.
        x_perturbed: ``t(x + delta / 255)``, the batch the client trains on.
        theta_u: Final co-trained model copy.
        losses: Loss of ``f_theta_u(t(x + delta))`` before each delta step.
    """

    initial_delta: Tensor
    delta: Tensor
    x_perturbed: Tensor
    theta_u: ParameterSet
    losses: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta_linf": float(np.max(np.abs(self.delta))) if self.delta.size else 0.0,
            "initial_loss": self.losses[0] if self.losses else None,
            "final_loss": self.losses[-1] if self.losses else None,
            "steps": len(self.losses),
        }


def project_annulus(delta: Tensor, cfg: PerturbationConfig) -> Tensor:
    """Project onto ``rho_min <= ||delta||_inf <= rho_max``.

    Components are clamped to ``[-rho_max, rho_max]``; a nonzero delta whose
    peak is below rho_min is scaled radially, and a zero delta gets
    ``rho_min`` at flat index 0.
    """
    out = np.clip(np.asarray(delta, dtype=np.float64), -cfg.rho_max, cfg.rho_max)
    if cfg.rho_min <= 0.0 or out.size == 0:
        return out
    magnitude = np.abs(out)
    peak = float(magnitude.max())
    if peak == 0.0:
        out = np.zeros_like(out)
        out.flat[0] = cfg.rho_min
    elif peak < cfg.rho_min:
        out = np.clip(out * (cfg.rho_min / peak), -cfg.rho_max, cfg.rho_max)
        i = int(np.argmax(magnitude))
        # Pin the peak so the lower bound holds exactly after rounding.
        out.flat[i] = np.copysign(cfg.rho_min, out.flat[i])
    return out


def init_delta(shape: Sequence[int], cfg: PerturbationConfig, seed: SeedLike) -> PerturbationState:
    """Uniform ``[-rho_max, rho_max]`` draw, projected onto the annulus."""
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-cfg.rho_max, cfg.rho_max, size=tuple(shape))
    return PerturbationState(delta=project_annulus(delta, cfg))


def perturb(transform: NormalizationTransform, x: Tensor, delta: Tensor) -> Tensor:
    """``t(x + delta / 255)``."""
    return normalize(transform, x + delta / PIXEL_SCALE)


def _delta_gradient(
    model: Model,
    theta_u: ParameterSet,
    transform: NormalizationTransform,
    x: Tensor,
    y: np.ndarray,
    delta: Tensor,
    loss_scale: float,
) -> Tuple[Tensor, float]:
    spec = model.spec
    n = x.shape[0]
    graph = Graph()
    nodes = model.bind(graph, theta_u)
    d = graph.leaf(delta.reshape(n, spec.input_dim))
    raw = graph.add(graph.constant(x.reshape(n, spec.input_dim)), graph.scale(d, 1.0 / PIXEL_SCALE))
    loss = model.loss(graph, nodes, normalize_node(graph, transform, raw, spec.input_shape), y)
    objective = graph.scale(loss, loss_scale) if loss_scale != 1.0 else loss
    (grad_d,) = graph.grad(objective, [d])
    return grad_d.value.reshape(delta.shape), loss.item()


def generate_perturbation(
    theta: ParameterSet,
    x: Tensor,
    y: Sequence[int],
    cfg: PerturbationConfig,
    seed: SeedLike,
    model: Model,
    transform: NormalizationTransform,
    client_id: Optional[int] = None,
    loss_scale: float = 1.0,
) -> PerturbationResult:
    """Run the alternating delta / theta_u optimisation for one client batch.

    Args:
        theta: Global model; never mutated (theta_u starts as the same value).
        x: Raw ``[n, C, H, W]`` batch in ``[0, 1]``.
        y: Labels.
        cfg: Generation hyperparameters.
        seed: Seed (or generator) for the initial delta.
        model: Model the batch is fed to.
        transform: Normalization t.
        client_id: Reported in errors and logs.
        loss_scale: Positive factor applied to the delta objective only.

    Returns:
        PerturbationResult with the final delta and ``t(x + delta / 255)``.

    Raises:
        PerturbationError: If a loss or gradient becomes non-finite.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    state = init_delta(x.shape, cfg, seed)
    initial = state.delta.copy()
    theta_u = theta
    losses: List[float] = []
    alpha = cfg.step_size

    while state.step < cfg.iterations:
        try:
            grad_delta, loss = _delta_gradient(model, theta_u, transform, x, y, state.delta, loss_scale)
            state.delta = project_annulus(state.delta - alpha * np.sign(grad_delta), cfg)
            if cfg.eta_u > 0.0:
                theta_grad, _ = model.gradient(theta_u, perturb(transform, x, state.delta), y)
                theta_u = theta_u.step(theta_grad, cfg.eta_u)
        except NonFiniteError as e:
            raise PerturbationError(
                f"Client {client_id}: non-finite value at generation step {state.step} ({e})",
                client_id=client_id,
                step=state.step,
            ) from e
        losses.append(loss)
        state.step += 1

    logger.debug(
        "Client %s perturbation: loss %.5f -> %.5f over %d steps",
        client_id, losses[0], losses[-1], len(losses),
    )
    return PerturbationResult(
        initial_delta=initial,
        delta=state.delta,
        x_perturbed=perturb(transform, x, state.delta),
        theta_u=theta_u,
        losses=losses,
    )


def client_gradient(
    theta: ParameterSet, x_perturbed: Tensor, y: Sequence[int], model: Model
) -> Tuple[GradientVector, float]:
    """Gradient of the global-model loss on already-normalized (perturbed) inputs."""
    return model.gradient(theta, x_perturbed, y)
