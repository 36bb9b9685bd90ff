"""Gradient inversion by a semi-honest server.

Dummy inputs (and soft labels) are optimised so that the gradient they
induce under theta matches an intercepted upload. The objective
differentiates through a gradient, so every step records a graph, takes the
parameter gradient inside it, and differentiates again w.r.t. the dummies.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import softmax
from tqdm import tqdm

from src.autodiff import Graph, Node, NonFiniteError, Tensor
from src.federation import RoundArtifact, SeedStreams
from src.models import GradientVector, Model, ParameterSet

logger = logging.getLogger(__name__)


class AttackError(Exception):
    """Raised when an attack cannot run or every restart fails."""
    pass


class AttackInit(str, Enum):
    """Starting point of the dummy input."""
    GAUSSIAN_NOISE = "gaussian-noise"
    PROVIDED = "provided"  # debug only: starts from the true input


class LabelMode(str, Enum):
    """How labels are handled during inversion."""
    OPTIMIZE_SOFT = "optimize-soft"
    KNOWN = "known"


class AttackConfig(BaseModel):
    """Inversion hyperparameters and which rounds to attack.

    Attributes:
        iterations: T gradient steps per restart.
        learning_rate: Step size on inputs and label logits (on the relative loss by default).
        restarts: R independent starts; the lowest final loss wins.
        init: ``gaussian-noise`` or ``provided``.
        init_noise: Std of noise added to a ``provided`` start.
        batch_size: Images per probe upload.
        label_mode: ``known`` infers single-image labels from the output-bias
            gradient and optimizes soft labels for larger uploads;
            ``optimize-soft`` always optimizes soft labels.
        images_per_client: Extra probe uploads of ``batch_size`` images each
            client makes at captured rounds, attacked besides its training upload.
        relative_loss: Descend on loss / ||g_target||^2 (reported losses stay raw).
        capture_rounds: Rounds whose artifacts are stored besides the final one.
        attack_rounds: Rounds attacked by a run; ``None`` means the final round.
        enabled: Skip the attack phase entirely when false.
    """

    iterations: int = Field(default=300, ge=1)
    learning_rate: float = Field(default=1.0, gt=0.0)
    restarts: int = Field(default=3, ge=1)
    init: AttackInit = AttackInit.GAUSSIAN_NOISE
    init_noise: float = Field(default=0.0, ge=0.0)
    batch_size: int = Field(default=1, ge=1)
    label_mode: LabelMode = LabelMode.KNOWN
    images_per_client: int = Field(default=0, ge=0)
    relative_loss: bool = True
    capture_rounds: List[int] = Field(default_factory=lambda: [1])
    attack_rounds: Optional[List[int]] = None
    enabled: bool = True


@dataclass
class ReconstructionResult:
    """Best restart of one inversion.

    Attributes:
        x_hat: Reconstruction in normalized model-input space, ``[b, C, H, W]``.
        y_hat: Soft-label probabilities, rows sum to 1.
        loss: Final (raw) matching loss of the best restart.
        restart_losses: Final loss per restart, NaN for discarded restarts.
        traces: Per-restart loss before every step.
        best_restart: Index of the winning restart.
        discarded: Restarts dropped for non-finite values.
    """

    x_hat: Tensor
    y_hat: Tensor
    loss: float
    restart_losses: List[float]
    traces: List[List[float]] = field(default_factory=list)
    best_restart: int = 0
    discarded: int = 0

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "best_restart": self.best_restart,
            "discarded": self.discarded,
            "restart_losses": self.restart_losses,
            "labels": np.argmax(self.y_hat, axis=1).tolist(),
        }


def _as_target(graph: Graph, y_hat: Union[Node, Tensor, Sequence[int]], classes: int) -> Union[Node, np.ndarray]:
    if isinstance(y_hat, Node):
        return y_hat
    y = np.asarray(y_hat)
    if y.ndim == 2:
        if y.shape[1] != classes:
            raise AttackError(f"Soft labels have {y.shape[1]} classes, model has {classes}")
        return graph.constant(y)
    return y.astype(np.int64)


def matching_loss(
    model: Model,
    theta: ParameterSet,
    x_hat: Union[Node, Tensor],
    y_hat: Union[Node, Tensor, Sequence[int]],
    g_target: GradientVector,
    graph: Optional[Graph] = None,
) -> Node:
    """``|| grad_theta L(f_theta(x_hat), y_hat) - g_target ||^2`` as a graph node.

    Args:
        model: Attacked architecture.
        theta: Parameters the target gradient was computed under.
        x_hat: Flattened ``[b, D]`` normalized inputs (node or values).
        y_hat: Soft-label probability node/array ``[b, classes]`` or integer labels.
        g_target: Intercepted gradient.
        graph: Graph to record into; ``x_hat`` nodes must belong to it.

    Raises:
        AttackError: If ``g_target`` does not match the parameter layout.
    """
    if g_target.names != theta.names or g_target.shapes != theta.shapes:
        raise AttackError(f"Target gradient {g_target!r} does not match parameters {theta!r}")
    if graph is None:
        graph = x_hat.graph if isinstance(x_hat, Node) else Graph()
    nodes = model.bind(graph, theta, requires_grad=True)
    if not isinstance(x_hat, Node):
        x_hat = graph.constant(np.asarray(x_hat, dtype=np.float64).reshape(-1, model.spec.input_dim))
    loss = model.loss(graph, nodes, x_hat, _as_target(graph, y_hat, model.spec.num_classes))
    grads = graph.grad(loss, list(nodes.values()))

    total: Optional[Node] = None
    for grad, target in zip(grads, g_target.values()):
        term = graph.sum(graph.square(graph.sub(grad, graph.constant(target))))
        total = term if total is None else graph.add(total, term)
    return total


def output_bias_name(model: Model) -> str:
    layers = [n for n, _ in model.parameter_shapes() if n.startswith("fc") and n.endswith(".bias")]
    return layers[-1]


def infer_labels(model: Model, g_target: GradientVector, batch_size: int = 1) -> np.ndarray:
    """Labels from the output-bias gradient.

    With one image the bias gradient is ``softmax - onehot``, so the true
    class is its only negative entry. For larger batches the ``batch_size``
    most negative entries are returned (a heuristic).
    """
    bias = g_target[output_bias_name(model)]
    return np.sort(np.argsort(bias, kind="stable")[:batch_size]).astype(np.int64)


def invert_linear_layer(g_weight: Tensor, g_bias: Tensor) -> Tensor:
    """Closed-form input of a single linear layer from its gradient (batch of one).

    For ``z = x W + b`` the weight gradient column ``i`` equals ``x * dL/dz_i``
    and the bias gradient entry is ``dL/dz_i``, so ``x = gW[:, i] / gb[i]``
    for any ``gb[i] != 0``; the largest ``|gb[i]|`` is used.

    Raises:
        AttackError: If every bias gradient entry is zero.
    """
    g_bias = np.asarray(g_bias)
    i = int(np.argmax(np.abs(g_bias)))
    if g_bias[i] == 0.0:
        raise AttackError("Bias gradient is zero; the input is not identifiable")
    return np.asarray(g_weight)[:, i] / g_bias[i]


def _initial_inputs(
    cfg: AttackConfig, rng: np.random.Generator, shape: tuple, provided: Optional[Tensor]
) -> Tensor:
    if cfg.init == AttackInit.PROVIDED:
        if provided is None:
            raise AttackError("init=provided needs the original inputs")
        start = np.asarray(provided, dtype=np.float64).reshape(shape).copy()
        if cfg.init_noise > 0.0:
            start = start + cfg.init_noise * rng.standard_normal(shape)
        return start
    return rng.standard_normal(shape)


def _run_restart(
    model: Model,
    theta: ParameterSet,
    g_target: GradientVector,
    cfg: AttackConfig,
    x: Tensor,
    label_logits: Optional[Tensor],
    labels: Optional[np.ndarray],
    scale: float,
) -> tuple:
    trace: List[float] = []
    for _ in range(cfg.iterations):
        graph = Graph()
        x_node = graph.leaf(x)
        if label_logits is not None:
            logit_node = graph.leaf(label_logits)
            loss = matching_loss(model, theta, x_node, graph.softmax(logit_node), g_target, graph)
            objective = graph.scale(loss, scale)
            grad_x, grad_l = graph.grad(objective, [x_node, logit_node])
            label_logits = label_logits - cfg.learning_rate * grad_l.value
        else:
            loss = matching_loss(model, theta, x_node, labels, g_target, graph)
            objective = graph.scale(loss, scale)
            (grad_x,) = graph.grad(objective, [x_node])
        trace.append(loss.item())
        x = x - cfg.learning_rate * grad_x.value

    graph = Graph()
    if label_logits is not None:
        target = graph.softmax(graph.constant(label_logits))
    else:
        target = labels
    final = matching_loss(model, theta, graph.constant(x), target, g_target, graph).item()
    return x, label_logits, trace, final


def reconstruct(
    model: Model,
    theta: ParameterSet,
    g_target: GradientVector,
    cfg: AttackConfig,
    rng: np.random.Generator,
    batch_size: Optional[int] = None,
    provided: Optional[Tensor] = None,
    labels: Optional[Sequence[int]] = None,
) -> ReconstructionResult:
    """Best-of-R gradient-matching inversion.

    Restarts draw their starting points sequentially from ``rng``, so the
    first R restarts of a longer run are the same as those of an R-restart run.

    Args:
        model: Attacked architecture.
        theta: Parameters the upload was computed under.
        g_target: Intercepted gradient.
        cfg: Attack hyperparameters.
        rng: Generator for starting points.
        batch_size: Images to reconstruct (defaults to ``cfg.batch_size``).
        provided: Original normalized inputs, only for ``init=provided``.
        labels: Known labels; in ``known`` mode a single-image upload infers them
            from ``g_target`` when omitted.

    Returns:
        ReconstructionResult of the restart with the lowest final loss.

    Raises:
        AttackError: If every restart produced non-finite values.
    """
    b = batch_size if batch_size is not None else cfg.batch_size
    spec = model.spec
    shape = (b, spec.input_dim)
    known: Optional[np.ndarray] = None
    if cfg.label_mode == LabelMode.KNOWN:
        if labels is not None:
            known = np.asarray(labels, dtype=np.int64)
        elif b == 1:
            known = infer_labels(model, g_target, b)
        else:
            logger.debug("Labels of a %d-image upload are not identifiable; optimizing soft labels", b)

    target_norm = float(np.sum(g_target.flatten() ** 2))
    scale = 1.0 / target_norm if cfg.relative_loss and target_norm > 0.0 else 1.0

    best: Optional[tuple] = None
    restart_losses: List[float] = []
    traces: List[List[float]] = []
    discarded = 0
    for r in range(cfg.restarts):
        x0 = _initial_inputs(cfg, rng, shape, provided)
        logits0 = rng.standard_normal((b, spec.num_classes)) if known is None else None
        try:
            x, logits, trace, final = _run_restart(model, theta, g_target, cfg, x0, logits0, known, scale)
        except NonFiniteError as e:
            discarded += 1
            restart_losses.append(math.nan)
            traces.append([])
            logger.warning("Attack restart %d discarded: %s", r, e)
            continue
        restart_losses.append(final)
        traces.append(trace)
        if best is None or final < best[3]:
            best = (x, logits, r, final)

    if best is None:
        raise AttackError(f"All {cfg.restarts} restarts produced non-finite values")
    x, logits, r, final = best
    if logits is not None:
        y_hat = softmax(logits, axis=1)
    else:
        y_hat = np.eye(spec.num_classes)[known]
    return ReconstructionResult(
        x_hat=x.reshape((b,) + tuple(spec.input_shape)),
        y_hat=y_hat,
        loss=final,
        restart_losses=restart_losses,
        traces=traces,
        best_restart=r,
        discarded=discarded,
    )


@dataclass
class AttackOutcome:
    """Reconstruction of one upload, with the originals kept for scoring."""

    round: int
    client_id: int
    slot: int
    originals: Tensor
    original_inputs: Tensor
    labels: np.ndarray
    result: ReconstructionResult


def attack_round(
    artifact: Optional[RoundArtifact],
    model: Model,
    cfg: AttackConfig,
    streams: SeedStreams,
    progress: bool = False,
) -> Dict[int, List[AttackOutcome]]:
    """Attack every selected client's upload of one round independently.

    Each client's training upload (slot 0) is inverted as received, with
    the whole batch it was computed on as the reconstruction size. Probe
    uploads, when captured, are attacked as well at their own slots.

    Args:
        artifact: RoundArtifact holding theta_t and the uploads.
        model: Attacked architecture.
        cfg: Attack hyperparameters.
        streams: SeedStreams; each upload uses stream ``("attack", round, client, slot)``.
        progress: Show a progress bar.

    Returns:
        Outcomes grouped by client id, in client-id then slot order.

    Raises:
        AttackError: If the artifact is missing or holds no uploads.
    """
    if artifact is None:
        raise AttackError("Round artifact is missing")
    targets = artifact.targets()
    if not targets:
        raise AttackError(f"Round {artifact.round} artifact holds no uploads")
    outcomes: Dict[int, List[AttackOutcome]] = {}
    for target in tqdm(targets, desc=f"attack round {artifact.round}", disable=not progress):
        rng = streams.generator("attack", artifact.round, target.client_id, target.slot)
        result = reconstruct(
            model,
            artifact.theta,
            target.gradient,
            cfg,
            rng,
            batch_size=len(target.labels),
            provided=target.inputs,
        )
        outcomes.setdefault(target.client_id, []).append(
            AttackOutcome(
                round=artifact.round,
                client_id=target.client_id,
                slot=target.slot,
                originals=target.images,
                original_inputs=target.inputs,
                labels=target.labels,
                result=result,
            )
        )
        logger.info(
            "Round %d client %d slot %d (%d images): matching loss %.4g (restart %d, %d discarded)",
            artifact.round, target.client_id, target.slot, len(target.labels),
            result.loss, result.best_restart, result.discarded,
        )
    return outcomes
