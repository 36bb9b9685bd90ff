"""IID client partitioning and the validation hold-out."""

from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from src.data.dataset import Dataset, DatasetError, Split

SeedLike = Union[int, np.random.Generator]


@dataclass(frozen=True)
class ClientShard:
    """Indices of one client's private examples within the training set."""

    client_id: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        """m_k."""
        return int(self.indices.shape[0])

    def to_dict(self) -> dict:
        return {"client_id": self.client_id, "size": self.size}


def partition_iid(dataset: Union[Dataset, int], num_clients: int, seed: SeedLike) -> List[ClientShard]:
    """Split a random permutation into ``num_clients`` near-equal disjoint shards.

    The first ``n mod K`` shards get one extra example.

    Args:
        dataset: Dataset (or its length) to partition.
        num_clients: K, with ``1 <= K <= n``.
        seed: Integer seed or generator.

    Raises:
        DatasetError: If K is outside ``[1, n]``.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    if not 1 <= num_clients <= n:
        raise DatasetError(f"Cannot split {n} examples across {num_clients} clients")

    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, num_clients)
    shards, start = [], 0
    for k in range(num_clients):
        size = base + (1 if k < extra else 0)
        indices = order[start:start + size].copy()
        indices.setflags(write=False)
        shards.append(ClientShard(client_id=k, indices=indices))
        start += size
    return shards


def split_validation(dataset: Dataset, fraction: float = 0.1) -> Tuple[Dataset, Dataset]:
    """Hold out the last ``fraction`` of ``dataset`` for validation.

    At least one example is held out when ``fraction > 0`` and two or more
    examples exist.
    """
    n = len(dataset)
    held_out = int(np.floor(n * fraction))
    if fraction > 0 and held_out == 0 and n >= 2:
        held_out = 1
    cut = n - held_out
    train = dataset.subset(np.arange(cut), split=Split.TRAIN)
    val = dataset.subset(np.arange(cut, n), split=Split.VAL)
    return train, val
