"""Finite-difference oracle for graph gradients."""

from typing import Callable, List, Sequence

import numpy as np

from src.autodiff.graph import Graph, Node, Tensor

GraphBuilder = Callable[[Graph, List[Node]], Node]


def _evaluate(build: GraphBuilder, values: Sequence[Tensor]) -> float:
    graph = Graph()
    leaves = [graph.leaf(v) for v in values]
    return build(graph, leaves).item()


def grad_check(build: GraphBuilder, point: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients with central differences.

    ``build`` receives a fresh graph and one differentiable leaf per entry of
    ``point`` and must return a scalar node. Builders may call ``graph.grad``
    themselves, which is how second-order expressions are checked.

    Args:
        build: Graph builder returning the scalar to differentiate.
        point: Values of the leaves.
        eps: Central-difference step, within ``[1e-6, 1e-3]``.

    Returns:
        Max over components of ``|analytic - numeric| / max(1, |numeric|)``.

    Raises:
        ValueError: If ``eps`` is out of range.
        NonFiniteError: If any intermediate is NaN/Inf (names the node id).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")

    values = [np.array(p, dtype=np.float64) for p in point]
    graph = Graph()
    leaves = [graph.leaf(v) for v in values]
    loss = build(graph, leaves)
    analytic = [node.value for node in graph.grad(loss, leaves)]

    worst = 0.0
    for value, exact in zip(values, analytic):
        for i in range(value.size):
            original = value.flat[i]
            value.flat[i] = original + eps
            plus = _evaluate(build, values)
            value.flat[i] = original - eps
            minus = _evaluate(build, values)
            value.flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            error = abs(exact.flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
    return worst
