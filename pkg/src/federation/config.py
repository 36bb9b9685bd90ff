"""FedSGD federation settings."""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, model_validator


class AggregationRule(str, Enum):
    """How client gradients are combined."""
    WEIGHTED = "weighted"  # m_k / m
    MEAN = "mean"


class FederationConfig(BaseModel):
    """Round loop parameters.

    Attributes:
        num_clients: K.
        rounds: M; 0 returns the initial model.
        clients_per_round: |C_t|; ``None`` selects every client each round.
        learning_rate: Server step eta; 0 freezes the model.
        patience: Rounds without a strict validation-accuracy improvement
            before stopping; ``None`` disables early stopping.
        batch_size: Examples each client samples from its shard per round;
            ``None`` uses the full shard.
        aggregation: ``weighted`` (m_k/m) or ``mean``.
        workers: Client threads per round.
    """

    num_clients: int = Field(default=4, ge=1)
    rounds: int = Field(default=50, ge=0)
    clients_per_round: Optional[int] = Field(default=None, ge=1)
    learning_rate: float = Field(default=0.01, ge=0.0)
    patience: Optional[int] = Field(default=30, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    aggregation: AggregationRule = AggregationRule.WEIGHTED
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _selection_fits(self) -> "FederationConfig":
        if self.clients_per_round is not None and self.clients_per_round > self.num_clients:
            raise ValueError(
                f"clients_per_round {self.clients_per_round} exceeds num_clients {self.num_clients}"
            )
        return self

    @property
    def selection_size(self) -> int:
        return self.clients_per_round if self.clients_per_round is not None else self.num_clients
