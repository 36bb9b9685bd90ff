"""Reverse-mode autodiff engine with second-order support."""

from src.autodiff.gradcheck import GraphBuilder, grad_check
from src.autodiff.graph import (
    AutodiffError,
    Graph,
    Node,
    NonFiniteError,
    ShapeMismatchError,
    Tensor,
    patch_index,
    pool_index,
)

__all__ = [
    # Graph
    "Graph",
    "Node",
    "Tensor",
    "patch_index",
    "pool_index",
    # Errors
    "AutodiffError",
    "ShapeMismatchError",
    "NonFiniteError",
    # Oracles
    "GraphBuilder",
    "grad_check",
]
