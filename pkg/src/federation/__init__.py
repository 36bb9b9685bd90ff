"""FedSGD federation: client selection, aggregation and the round loop."""

from src.federation.config import AggregationRule, FederationConfig
from src.federation.records import ROUND_COLUMNS, RecordStream, RoundRecord, read_rounds
from src.federation.seeds import SeedStreams
from src.federation.server import (
    CaptureSettings,
    CapturedUpload,
    ClientAbortError,
    Federation,
    FederationError,
    RoundArtifact,
    StopReason,
    TrainingResult,
    aggregate,
    select_clients,
)

__all__ = [
    # Config
    "AggregationRule",
    "FederationConfig",
    # Seeds
    "SeedStreams",
    # Records
    "ROUND_COLUMNS",
    "RoundRecord",
    "RecordStream",
    "read_rounds",
    # Server
    "Federation",
    "FederationError",
    "ClientAbortError",
    "StopReason",
    "CaptureSettings",
    "CapturedUpload",
    "RoundArtifact",
    "TrainingResult",
    "select_clients",
    "aggregate",
]
