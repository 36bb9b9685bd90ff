"""Per-round records and their CSV stream."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

ROUND_COLUMNS = ["round", "val_acc", "test_acc", "grad_norm_mean", "elapsed_ms", "clients", "train_loss"]


@dataclass
class RoundRecord:
    """Outcome of one FedSGD round.

    ``elapsed_ms`` is 0 unless wall time recording is switched on, which keeps
    the CSV byte-identical across repeated runs.
    """

    round: int
    clients: List[int]
    grad_norms: Dict[int, float]
    val_acc: float
    test_acc: float
    train_loss: float
    elapsed_ms: float = 0.0

    @property
    def grad_norm_mean(self) -> float:
        return float(np.mean(list(self.grad_norms.values()))) if self.grad_norms else 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "grad_norm_mean": self.grad_norm_mean,
            "elapsed_ms": self.elapsed_ms,
            "clients": " ".join(str(k) for k in self.clients),
            "train_loss": self.train_loss,
        }


@dataclass
class RecordStream:
    """Appends RoundRecords to a CSV as they are produced.

    Rounds must arrive in strictly increasing order.
    """

    path: Optional[Path] = None
    records: List[RoundRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=ROUND_COLUMNS).to_csv(self.path, index=False)

    def append(self, record: RoundRecord) -> None:
        if self.records and record.round <= self.records[-1].round:
            raise ValueError(
                f"Round {record.round} recorded after round {self.records[-1].round}"
            )
        self.records.append(record)
        if self.path is not None:
            row = pd.DataFrame([record.to_dict()], columns=ROUND_COLUMNS)
            row.to_csv(self.path, mode="a", header=False, index=False, float_format="%.10g")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records], columns=ROUND_COLUMNS)


def read_rounds(path: Path) -> pd.DataFrame:
    """Load a rounds CSV written by ``RecordStream``."""
    return pd.read_csv(path, dtype={"clients": str})
