"""Datasets, loaders, client partitioning and normalization."""

from src.data.dataset import Dataset, DatasetError, Split
from src.data.loaders import (
    DatasetName,
    DatasetSpec,
    SyntheticSpec,
    load_cifar10,
    load_dataset,
    load_idx,
    load_split,
    persist_synthetic,
)
from src.data.partition import ClientShard, partition_iid, split_validation
from src.data.synthetic import load_saved_dataset, save_dataset, synth_blobs
from src.data.transforms import (
    NormalizationMode,
    NormalizationTransform,
    denormalize,
    normalize,
    normalize_node,
)

__all__ = [
    # Datasets
    "Dataset",
    "DatasetError",
    "Split",
    # Loaders
    "DatasetName",
    "DatasetSpec",
    "SyntheticSpec",
    "load_idx",
    "load_cifar10",
    "load_split",
    "load_dataset",
    "persist_synthetic",
    # Synthetic
    "synth_blobs",
    "save_dataset",
    "load_saved_dataset",
    # Partitioning
    "ClientShard",
    "partition_iid",
    "split_validation",
    # Normalization
    "NormalizationMode",
    "NormalizationTransform",
    "normalize",
    "denormalize",
    "normalize_node",
]
