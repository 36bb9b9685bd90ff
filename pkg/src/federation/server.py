"""FedSGD server loop with pluggable client-side defenses."""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.autodiff import AutodiffError, Tensor
from src.data import ClientShard, Dataset, NormalizationTransform, normalize
from src.defense import ClientUpload, Defense, PerturbationError, sample_batch
from src.evaluation.metrics import accuracy
from src.federation.config import AggregationRule, FederationConfig
from src.federation.records import RecordStream, RoundRecord
from src.federation.seeds import SeedStreams
from src.models import GradientVector, Model, ModelError, ParameterSet

logger = logging.getLogger(__name__)


class FederationError(Exception):
    """Raised when a round cannot be completed."""
    pass


class ClientAbortError(FederationError):
    """Raised when one client fails during a round."""

    def __init__(self, client_id: int, round_index: int, cause: Exception):
        super().__init__(f"Client {client_id} aborted round {round_index}: {cause}")
        self.client_id = client_id
        self.round_index = round_index


class StopReason:
    COMPLETED = "completed"
    EARLY_STOP = "early-stop"
    NO_ROUNDS = "no-rounds"


def select_clients(
    num_clients: int, count: int, round_index: int, seed: Union[int, SeedStreams]
) -> List[int]:
    """Uniform sample of ``count`` client ids without replacement, sorted ascending."""
    if not 1 <= count <= num_clients:
        raise FederationError(f"Cannot select {count} of {num_clients} clients")
    if count == num_clients:
        return list(range(num_clients))
    streams = seed if isinstance(seed, SeedStreams) else SeedStreams(seed)
    rng = streams.generator("selection", round_index)
    return sorted(int(k) for k in rng.choice(num_clients, size=count, replace=False))


def aggregate(gradients: Dict[int, GradientVector], weights: Dict[int, float]) -> GradientVector:
    """Weighted mean ``sum_k (m_k / sum_j m_j) * g_k``, accumulated in client-id order.

    Raises:
        FederationError: On empty input, missing or non-positive weights, or
            gradients of different layouts.
    """
    if not gradients:
        raise FederationError("No gradients to aggregate")
    ids = sorted(gradients)
    if any(k not in weights or weights[k] <= 0 for k in ids):
        raise FederationError(f"Aggregation weights must be positive for every client: {weights}")
    template = gradients[ids[0]]
    total = float(sum(weights[k] for k in ids))
    acc = np.zeros(template.size)
    for k in ids:
        g = gradients[k]
        if g.size != template.size:
            raise FederationError(f"Client {k} gradient length {g.size} != {template.size}")
        acc = acc + (weights[k] / total) * g.flatten()
    return GradientVector.from_flat(template, acc)


@dataclass
class CapturedUpload:
    """One upload the server kept, with the batch it came from for scoring.

    Attributes:
        client_id: Uploading client.
        slot: 0 for the training upload, ``1 + j`` for the j-th probe.
        images: Raw pixels of the batch, ``[b, C, H, W]``.
        labels: Batch labels.
        gradient: Gradient the server received.
        inputs: Normalized inputs the gradient was computed on.
        delta: FedEM perturbation in normalized space, if any.
    """

    client_id: int
    slot: int
    images: Tensor
    labels: np.ndarray
    gradient: GradientVector
    inputs: Tensor
    delta: Optional[Tensor] = None

    @property
    def is_probe(self) -> bool:
        return self.slot > 0


@dataclass
class RoundArtifact:
    """What a semi-honest server holds after round ``round``.

    Attributes:
        round: Round index.
        theta: Global model the round started from.
        clients: Selected client ids.
        uploads: Each selected client's training upload, by client id.
        probes: Optional small-batch uploads made through the same defense.
    """

    round: int
    theta: ParameterSet
    clients: List[int]
    uploads: Dict[int, CapturedUpload] = field(default_factory=dict)
    probes: List[CapturedUpload] = field(default_factory=list)

    @property
    def gradients(self) -> Dict[int, GradientVector]:
        return {k: upload.gradient for k, upload in self.uploads.items()}

    def targets(self) -> List[CapturedUpload]:
        """Uploads and probes in client-id then slot order."""
        return sorted([*self.uploads.values(), *self.probes], key=lambda u: (u.client_id, u.slot))


@dataclass
class CaptureSettings:
    """Which rounds keep artifacts and how many extra probe uploads each client makes."""

    rounds: Set[int] = field(default_factory=lambda: {1})
    final: bool = True
    probes_per_client: int = 0
    probe_batch_size: int = 1

    def wants(self, round_index: int) -> bool:
        return round_index in self.rounds


@dataclass
class TrainingResult:
    """Output of ``Federation.train``.

    Attributes:
        theta: Best-validation snapshot.
        final_theta: Parameters after the last executed round.
        records: One RoundRecord per executed round.
        stop_reason: ``completed``, ``early-stop`` or ``no-rounds``.
        best_round: Round of the snapshot (0 for the initial model).
        artifacts: Captured rounds.
    """

    theta: ParameterSet
    final_theta: ParameterSet
    records: List[RoundRecord]
    stop_reason: str
    best_round: int
    artifacts: Dict[int, RoundArtifact] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "best_round": self.best_round,
            "rounds_run": len(self.records),
            "captured_rounds": sorted(self.artifacts),
        }


RoundHook = Callable[[RoundRecord, Dict[int, ClientUpload]], None]


class Federation:
    """Single-process FedSGD simulation.

    Attributes:
        config: Round loop settings.
        model: Model the clients train.
        defense: Client-side defense applied to every upload.
        shards: Client partitions of ``train``.
    """

    def __init__(
        self,
        config: FederationConfig,
        model: Model,
        defense: Defense,
        train: Dataset,
        shards: Sequence[ClientShard],
        val: Dataset,
        test: Dataset,
        transform: NormalizationTransform,
        streams: SeedStreams,
        record_wall_time: bool = False,
        progress: bool = False,
    ):
        if len(shards) != config.num_clients:
            raise FederationError(f"{len(shards)} shards for {config.num_clients} clients")
        if tuple(train.image_shape) != tuple(model.spec.input_shape):
            raise FederationError(
                f"Dataset images {train.image_shape} do not fit model input {model.spec.input_shape}"
            )
        if train.num_classes != model.spec.num_classes:
            raise FederationError(
                f"Dataset has {train.num_classes} classes, model predicts {model.spec.num_classes}"
            )
        self.config = config
        self.model = model
        self.defense = defense
        self.train_set = train
        self.shards = {shard.client_id: shard for shard in shards}
        self.val = val
        self.test = test
        self.transform = transform
        self.streams = streams
        self.record_wall_time = record_wall_time
        self.progress = progress
        self._val_inputs = normalize(transform, val.images)
        self._test_inputs = normalize(transform, test.images)

    # -- clients -----------------------------------------------------------

    def client_batch(self, client_id: int, round_index: int) -> Tuple[Tensor, np.ndarray]:
        """Raw images and labels client ``client_id`` trains on in round ``round_index``."""
        shard = self.shards[client_id]
        rng = self.streams.generator("batch", client_id, round_index)
        indices = sample_batch(shard.indices, self.config.batch_size, rng)
        return self.train_set.images[indices], self.train_set.labels[indices]

    def _client_upload(self, theta: ParameterSet, client_id: int, round_index: int) -> ClientUpload:
        x, y = self.client_batch(client_id, round_index)
        try:
            return self.defense.upload(theta, x, y, client_id, round_index)
        except (PerturbationError, AutodiffError, ModelError) as e:
            raise ClientAbortError(client_id, round_index, e) from e

    def _collect(
        self, theta: ParameterSet, clients: List[int], round_index: int
    ) -> Dict[int, ClientUpload]:
        if self.config.workers == 1 or len(clients) == 1:
            return {k: self._client_upload(theta, k, round_index) for k in clients}
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            futures = {k: pool.submit(self._client_upload, theta, k, round_index) for k in clients}
            return {k: futures[k].result() for k in clients}

    def make_probes(
        self, theta: ParameterSet, round_index: int, clients: List[int], count: int, batch_size: int
    ) -> List[CapturedUpload]:
        """Small-batch uploads through the active defense under ``theta``, at slots ``1..count``."""
        probes = []
        for k in clients:
            shard = self.shards[k]
            for slot in range(count):
                rng = self.streams.generator("probe/batch", k, round_index, slot)
                size = min(batch_size, shard.size)
                indices = np.sort(rng.choice(shard.indices, size=size, replace=False))
                x = self.train_set.images[indices]
                y = self.train_set.labels[indices]
                try:
                    upload = self.defense.upload(theta, x, y, k, round_index, purpose="probe", slot=slot)
                except (PerturbationError, AutodiffError, ModelError) as e:
                    raise ClientAbortError(k, round_index, e) from e
                probes.append(CapturedUpload(k, slot + 1, x, y, upload.gradient, upload.inputs, upload.delta))
        return probes

    # -- server ------------------------------------------------------------

    def evaluate(self, theta: ParameterSet) -> Tuple[float, float]:
        """Validation and test accuracy (NaN for an empty split)."""
        val_acc = accuracy(self.model, theta, self._val_inputs, self.val.labels) if len(self.val) else math.nan
        test_acc = accuracy(self.model, theta, self._test_inputs, self.test.labels) if len(self.test) else math.nan
        return val_acc, test_acc

    def run_round(
        self, theta: ParameterSet, round_index: int
    ) -> Tuple[ParameterSet, RoundRecord, Dict[int, ClientUpload]]:
        """Distribute theta, collect uploads, aggregate and step.

        Returns:
            ``(new theta, record, uploads by client id)``.

        Raises:
            ClientAbortError: If any client fails, naming the client.
        """
        start = time.perf_counter()
        clients = select_clients(
            self.config.num_clients, self.config.selection_size, round_index, self.streams
        )
        uploads = self._collect(theta, clients, round_index)

        if self.config.aggregation == AggregationRule.WEIGHTED:
            weights = {k: float(uploads[k].num_examples) for k in clients}
        else:
            weights = {k: 1.0 for k in clients}
        g_global = aggregate({k: uploads[k].gradient for k in clients}, weights)
        new_theta = theta.step(g_global, self.config.learning_rate)

        val_acc, test_acc = self.evaluate(new_theta)
        total = sum(weights.values())
        record = RoundRecord(
            round=round_index,
            clients=clients,
            grad_norms={k: uploads[k].gradient.norm() for k in clients},
            val_acc=val_acc,
            test_acc=test_acc,
            train_loss=float(sum(weights[k] * uploads[k].loss for k in clients) / total),
            elapsed_ms=(time.perf_counter() - start) * 1000.0 if self.record_wall_time else 0.0,
        )
        logger.info(
            "Round %d: val_acc=%.4f test_acc=%.4f grad_norm=%.4g loss=%.4f",
            round_index, val_acc, test_acc, record.grad_norm_mean, record.train_loss,
        )
        return new_theta, record, uploads

    def _artifact(
        self,
        theta: ParameterSet,
        round_index: int,
        clients: List[int],
        uploads: Dict[int, ClientUpload],
        capture: CaptureSettings,
    ) -> RoundArtifact:
        kept = {}
        for k in clients:
            x, y = self.client_batch(k, round_index)
            upload = uploads[k]
            kept[k] = CapturedUpload(k, 0, x, y, upload.gradient, upload.inputs, upload.delta)
        probes = self.make_probes(
            theta, round_index, clients, capture.probes_per_client, capture.probe_batch_size
        )
        return RoundArtifact(round=round_index, theta=theta, clients=clients, uploads=kept, probes=probes)

    def train(
        self,
        theta: ParameterSet,
        stream: Optional[RecordStream] = None,
        capture: Optional[CaptureSettings] = None,
        on_round: Optional[RoundHook] = None,
    ) -> TrainingResult:
        """Run up to M rounds with early stopping on validation accuracy.

        Args:
            theta: Initial global model.
            stream: Receives every RoundRecord as it is produced.
            capture: Rounds whose artifacts (theta_t, uploads, probes) are kept.
            on_round: Called after each round with its record and uploads.

        Returns:
            TrainingResult holding the best-validation snapshot.
        """
        stream = stream if stream is not None else RecordStream()
        capture = capture if capture is not None else CaptureSettings(rounds=set(), final=False)
        initial = theta
        artifacts: Dict[int, RoundArtifact] = {}
        best_theta, best_round, best_acc = theta, 0, -math.inf
        stale = 0
        reason = StopReason.NO_ROUNDS if self.config.rounds == 0 else StopReason.COMPLETED
        has_val = len(self.val) > 0
        if not has_val:
            logger.warning("Empty validation split: early stopping disabled, keeping the last model")
        last: Optional[Tuple[ParameterSet, int, List[int], Dict[int, ClientUpload]]] = None

        rounds = range(1, self.config.rounds + 1)
        for t in tqdm(rounds, desc="rounds", disable=not self.progress):
            theta_t = theta
            theta, record, uploads = self.run_round(theta_t, t)
            stream.append(record)
            last = (theta_t, t, record.clients, uploads)
            if capture.wants(t):
                artifacts[t] = self._artifact(theta_t, t, record.clients, uploads, capture)
            if on_round is not None:
                on_round(record, uploads)

            if not has_val:
                best_theta, best_round = theta, t
                continue
            if record.val_acc > best_acc:
                best_theta, best_round, best_acc, stale = theta, t, record.val_acc, 0
            else:
                stale += 1
            if self.config.patience is not None and stale >= self.config.patience:
                reason = StopReason.EARLY_STOP
                logger.info("Early stop at round %d (best round %d, val_acc %.4f)", t, best_round, best_acc)
                break

        if capture.final and last is not None and last[1] not in artifacts:
            theta_t, t, clients, uploads = last
            artifacts[t] = self._artifact(theta_t, t, clients, uploads, capture)

        if best_round == 0:
            best_theta = initial
        return TrainingResult(
            theta=best_theta,
            final_theta=theta,
            records=stream.records,
            stop_reason=reason,
            best_round=best_round,
            artifacts=artifacts,
        )
