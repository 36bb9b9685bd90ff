"""Immutable named-tensor collections: model parameters and their gradients."""

from typing import Any, Callable, Dict, Iterable, Iterator, List, Tuple, Type, TypeVar

import numpy as np

from src.autodiff import Tensor

T = TypeVar("T", bound="NamedTensors")


class ModelError(Exception):
    """Raised when parameters or inputs do not fit a model."""
    pass


def _frozen(value: Any) -> Tensor:
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


class NamedTensors:
    """Ordered collection of named float64 tensors.

    The canonical flattening order is the declaration order; tensors are
    read-only, so instances can be shared between threads.
    """

    def __init__(self, items: Iterable[Tuple[str, Any]]):
        self._items: Tuple[Tuple[str, Tensor], ...] = tuple(
            (str(name), _frozen(value)) for name, value in items
        )
        names = [name for name, _ in self._items]
        if len(set(names)) != len(names):
            raise ModelError(f"Duplicate tensor names: {names}")
        self._index: Dict[str, int] = {name: i for i, name in enumerate(names)}

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._items[self._index[name]][1]
        except KeyError:
            raise ModelError(f"Unknown tensor: {name}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{name}{tuple(value.shape)}" for name, value in self._items)
        return f"{type(self).__name__}({shapes})"

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self._items]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [value.shape for _, value in self._items]

    @property
    def size(self) -> int:
        """Total number of scalars."""
        return int(sum(value.size for _, value in self._items))

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._items)

    def values(self) -> List[Tensor]:
        return [value for _, value in self._items]

    def flatten(self) -> Tensor:
        """Concatenate all tensors in canonical order."""
        if not self._items:
            return np.zeros(0)
        return np.concatenate([value.ravel() for _, value in self._items])

    @classmethod
    def from_flat(cls: Type[T], template: "NamedTensors", vector: Any) -> T:
        """Rebuild a collection shaped like ``template`` from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64).ravel()
        if vector.size != template.size:
            raise ModelError(f"Flat length {vector.size} does not match {template.size}")
        items, offset = [], 0
        for name, shape in zip(template.names, template.shapes):
            count = int(np.prod(shape, dtype=np.int64))
            items.append((name, vector[offset:offset + count].reshape(shape)))
            offset += count
        return cls(items)

    @classmethod
    def zeros(cls: Type[T], layout: Iterable[Tuple[str, Tuple[int, ...]]]) -> T:
        """All-zero collection with the given names and shapes."""
        return cls((name, np.zeros(shape)) for name, shape in layout)

    def map(self: T, fn: Callable[[Tensor], Tensor]) -> T:
        return type(self)((name, fn(value)) for name, value in self._items)

    def check_compatible(self, other: "NamedTensors") -> None:
        """Raise ``ModelError`` unless ``other`` has the same names and shapes."""
        if self.names != other.names or self.shapes != other.shapes:
            raise ModelError(
                f"Incompatible tensor collections: {list(zip(self.names, self.shapes))} "
                f"vs {list(zip(other.names, other.shapes))}"
            )

    def equals(self, other: "NamedTensors") -> bool:
        """Bit-level equality of names, shapes and values."""
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.values(), other.values())
        )


class ParameterSet(NamedTensors):
    """Weights and biases of one model instance (θ or θ_u)."""

    def step(self, gradient: "GradientVector", learning_rate: float) -> "ParameterSet":
        """Return ``θ - learning_rate * g``."""
        self.check_compatible(gradient)
        return ParameterSet(
            (name, value - learning_rate * g)
            for (name, value), g in zip(self._items, gradient.values())
        )


class GradientVector(NamedTensors):
    """Parameter-shaped gradient collection."""

    def norm(self) -> float:
        """L2 norm of the flattened vector."""
        return float(np.linalg.norm(self.flatten()))

    def scaled(self, factor: float) -> "GradientVector":
        return self.map(lambda value: value * factor)
