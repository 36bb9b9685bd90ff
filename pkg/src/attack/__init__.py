"""Gradient inversion attack and reconstruction export."""

from src.attack.dlg import (
    AttackConfig,
    AttackError,
    AttackInit,
    AttackOutcome,
    LabelMode,
    ReconstructionResult,
    attack_round,
    infer_labels,
    invert_linear_layer,
    matching_loss,
    reconstruct,
)
from src.attack.export import TRACE_COLUMNS, export_round, montage, save_image, to_uint8

__all__ = [
    # DLG
    "AttackConfig",
    "AttackInit",
    "LabelMode",
    "AttackError",
    "AttackOutcome",
    "ReconstructionResult",
    "matching_loss",
    "reconstruct",
    "infer_labels",
    "invert_linear_layer",
    "attack_round",
    # Export
    "TRACE_COLUMNS",
    "save_image",
    "montage",
    "export_round",
    "to_uint8",
]
