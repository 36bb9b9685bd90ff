"""Computation graph with reverse-mode differentiation.

Every backward rule is written in terms of graph operations, so the gradient
nodes returned by ``Graph.grad`` live in the same graph and can be
differentiated again (reverse-over-reverse). A graph is append-only: node
inputs always reference earlier nodes, which makes the node list a valid
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logsumexp

Tensor = NDArray[np.float64]
Operand = Union["Node", float, int]


class AutodiffError(Exception):
    """Raised when an operation cannot be recorded or differentiated."""
    pass


class ShapeMismatchError(AutodiffError):
    """Raised when operand shapes are incompatible."""
    pass


class NonFiniteError(AutodiffError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"Non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


@dataclass(eq=False)
class Node:
    """A recorded operation and its cached output."""

    graph: "Graph" = field(repr=False)
    id: int
    op: str
    inputs: Tuple[int, ...]
    value: Tensor = field(repr=False)
    requires_grad: bool
    attrs: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        """Return the value of a single-element node as a float."""
        if self.value.size != 1:
            raise AutodiffError(f"item() needs a single element, node {self.id} has shape {self.shape}")
        return float(self.value.reshape(()))

    def __add__(self, other: Operand) -> "Node":
        if isinstance(other, Node):
            return self.graph.add(self, other)
        return self.graph.scale(self, 1.0, float(other))

    def __sub__(self, other: Operand) -> "Node":
        if isinstance(other, Node):
            return self.graph.sub(self, other)
        return self.graph.scale(self, 1.0, -float(other))

    def __mul__(self, other: Operand) -> "Node":
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Node") -> "Node":
        return self.graph.matmul(self, other)

    def __neg__(self) -> "Node":
        return self.graph.scale(self, -1.0)


# A backward rule maps (graph, node, adjoint, needs) to one adjoint per input,
# None where the input does not lead to a requested leaf.
BackwardRule = Callable[["Graph", Node, Node, Tuple[bool, ...]], Tuple[Optional[Node], ...]]
_BACKWARD: Dict[str, BackwardRule] = {}


def backward_rule(op: str) -> Callable[[BackwardRule], BackwardRule]:
    """Register the backward rule for ``op``."""
    def register(rule: BackwardRule) -> BackwardRule:
        _BACKWARD[op] = rule
        return rule
    return register


class Graph:
    """Append-only computation graph.

    Attributes:
        nodes: Recorded nodes in creation order.
        check_finite: Reject NaN/Inf outputs with ``NonFiniteError``.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: List[Node] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    # -- recording ---------------------------------------------------------

    def _record(self, op: str, inputs: Sequence[Node], value: Any, **attrs: Any) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node_id = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(node_id, op)
        node = Node(
            graph=self,
            id=node_id,
            op=op,
            inputs=tuple(n.id for n in inputs),
            value=value,
            requires_grad=any(n.requires_grad for n in inputs),
            attrs=attrs,
        )
        self.nodes.append(node)
        return node

    def _own(self, *nodes: Node) -> None:
        for node in nodes:
            if node.graph is not self:
                raise AutodiffError(f"Node {node.id} ({node.op}) belongs to another graph")

    def leaf(self, value: Any, requires_grad: bool = True, name: Optional[str] = None) -> Node:
        """Record a leaf tensor (copied)."""
        array = np.array(value, dtype=np.float64)
        node_id = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(array)):
            raise NonFiniteError(node_id, "leaf")
        node = Node(self, node_id, "leaf", (), array, requires_grad, {"name": name})
        self.nodes.append(node)
        return node

    def constant(self, value: Any) -> Node:
        """Record a non-differentiable leaf."""
        return self.leaf(value, requires_grad=False)

    @staticmethod
    def _same_shape(op: str, a: Node, b: Node) -> None:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")

    @staticmethod
    def _ndim(op: str, a: Node, ndim: int) -> None:
        if a.value.ndim != ndim:
            raise ShapeMismatchError(f"{op}: expected a {ndim}-d operand, got shape {a.shape}")

    # -- elementwise -------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        self._same_shape("add", a, b)
        return self._record("add", (a, b), a.value + b.value)

    def sub(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        self._same_shape("sub", a, b)
        return self._record("sub", (a, b), a.value - b.value)

    def mul(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        self._same_shape("mul", a, b)
        return self._record("mul", (a, b), a.value * b.value)

    def scale(self, a: Node, factor: float, shift: float = 0.0) -> Node:
        """Affine map ``factor * a + shift`` with scalar coefficients."""
        self._own(a)
        factor, shift = float(factor), float(shift)
        value = a.value * factor
        if shift != 0.0:
            value = value + shift
        return self._record("scale", (a,), value, factor=factor, shift=shift)

    def square(self, a: Node) -> Node:
        self._own(a)
        return self._record("square", (a,), a.value * a.value)

    def sigmoid(self, a: Node) -> Node:
        self._own(a)
        return self._record("sigmoid", (a,), expit(a.value))

    def tanh(self, a: Node) -> Node:
        self._own(a)
        return self._record("tanh", (a,), np.tanh(a.value))

    def exp(self, a: Node) -> Node:
        self._own(a)
        return self._record("exp", (a,), np.exp(a.value))

    def clamp(self, a: Node, low: float, high: float) -> Node:
        """Clip to ``[low, high]``; the derivative is 1 strictly inside, 0 elsewhere."""
        self._own(a)
        if low > high:
            raise AutodiffError(f"clamp: empty interval [{low}, {high}]")
        return self._record("clamp", (a,), np.clip(a.value, low, high), low=float(low), high=float(high))

    # -- linear algebra and layout ----------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        self._ndim("matmul", a, 2)
        self._ndim("matmul", b, 2)
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        return self._record("matmul", (a, b), a.value @ b.value)

    def transpose(self, a: Node) -> Node:
        self._own(a)
        self._ndim("transpose", a, 2)
        return self._record("transpose", (a,), a.value.T.copy())

    def add_bias(self, x: Node, bias: Node) -> Node:
        """Add a ``[d]`` bias to every row of an ``[n, d]`` matrix."""
        self._own(x, bias)
        self._ndim("add_bias", x, 2)
        self._ndim("add_bias", bias, 1)
        if x.shape[1] != bias.shape[0]:
            raise ShapeMismatchError(f"add_bias: shapes {x.shape} and {bias.shape} differ in width")
        return self._record("add_bias", (x, bias), x.value + bias.value)

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        self._own(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != a.value.size:
            raise ShapeMismatchError(f"reshape: cannot view shape {a.shape} as {shape}")
        return self._record("reshape", (a,), a.value.reshape(shape), shape=shape)

    def gather(self, a: Node, index: NDArray[np.intp]) -> Node:
        """Select columns ``a[:, index]`` of an ``[n, F]`` matrix."""
        self._own(a)
        self._ndim("gather", a, 2)
        index = np.asarray(index, dtype=np.intp)
        if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[1])):
            raise ShapeMismatchError(f"gather: index out of range for width {a.shape[1]}")
        return self._record("gather", (a,), a.value[:, index], index=index, width=a.shape[1])

    def scatter(self, a: Node, index: NDArray[np.intp], width: int) -> Node:
        """Adjoint of ``gather``: add columns of ``a`` into ``[n, width]`` zeros."""
        self._own(a)
        self._ndim("scatter", a, 2)
        index = np.asarray(index, dtype=np.intp)
        if a.shape[1] != index.size:
            raise ShapeMismatchError(f"scatter: {a.shape[1]} columns for {index.size} indices")
        out = np.zeros((a.shape[0], int(width)))
        np.add.at(out, (slice(None), index), a.value)
        return self._record("scatter", (a,), out, index=index, width=int(width))

    # -- reductions and their broadcasts ----------------------------------

    def sum(self, a: Node) -> Node:
        self._own(a)
        return self._record("sum", (a,), np.sum(a.value))

    def broadcast_scalar(self, a: Node, shape: Sequence[int]) -> Node:
        self._own(a)
        if a.value.size != 1:
            raise ShapeMismatchError(f"broadcast_scalar: operand has shape {a.shape}")
        shape = tuple(int(s) for s in shape)
        return self._record("broadcast_scalar", (a,), np.full(shape, float(a.value.reshape(()))), shape=shape)

    def sum_rows(self, a: Node) -> Node:
        """``[n, d] -> [d]``."""
        self._own(a)
        self._ndim("sum_rows", a, 2)
        return self._record("sum_rows", (a,), a.value.sum(axis=0))

    def broadcast_rows(self, a: Node, rows: int) -> Node:
        """``[d] -> [rows, d]``."""
        self._own(a)
        self._ndim("broadcast_rows", a, 1)
        return self._record("broadcast_rows", (a,), np.tile(a.value, (int(rows), 1)))

    def sum_cols(self, a: Node) -> Node:
        """``[n, d] -> [n]``."""
        self._own(a)
        self._ndim("sum_cols", a, 2)
        return self._record("sum_cols", (a,), a.value.sum(axis=1))

    def broadcast_cols(self, a: Node, cols: int) -> Node:
        """``[n] -> [n, cols]``."""
        self._own(a)
        self._ndim("broadcast_cols", a, 1)
        return self._record("broadcast_cols", (a,), np.repeat(a.value[:, None], int(cols), axis=1))

    def logsumexp_rows(self, a: Node) -> Node:
        """Row-wise log-sum-exp, ``[n, d] -> [n]``."""
        self._own(a)
        self._ndim("logsumexp_rows", a, 2)
        return self._record("logsumexp_rows", (a,), logsumexp(a.value, axis=1))

    # -- composites --------------------------------------------------------

    def mean(self, a: Node) -> Node:
        return self.scale(self.sum(a), 1.0 / a.value.size)

    def log_softmax(self, logits: Node) -> Node:
        lse = self.logsumexp_rows(logits)
        return self.sub(logits, self.broadcast_cols(lse, logits.shape[1]))

    def softmax(self, logits: Node) -> Node:
        return self.exp(self.log_softmax(logits))

    def softmax_cross_entropy(
        self,
        logits: Node,
        target: Union[Node, Sequence[int], NDArray[np.integer]],
        reduction: str = "mean",
    ) -> Node:
        """Cross-entropy of ``softmax(logits)`` against labels or soft targets.

        Args:
            logits: ``[n, c]`` scores.
            target: Integer labels ``[n]`` or a ``[n, c]`` node of target
                probabilities (the soft-label form used by the attack).
            reduction: ``"mean"`` over the batch or ``"none"`` for per-sample losses.

        Returns:
            Scalar node, or ``[n]`` node when ``reduction="none"``.
        """
        self._ndim("softmax_cross_entropy", logits, 2)
        n, classes = logits.shape
        if not isinstance(target, Node):
            labels = np.asarray(target)
            if labels.shape != (n,):
                raise ShapeMismatchError(
                    f"softmax_cross_entropy: {labels.shape} labels for logits {logits.shape}"
                )
            if labels.size and (labels.min() < 0 or labels.max() >= classes):
                raise AutodiffError(f"softmax_cross_entropy: labels outside [0, {classes})")
            target = self.constant(np.eye(classes)[labels.astype(np.intp)])
        self._same_shape("softmax_cross_entropy", logits, target)
        per_sample = self.scale(self.sum_cols(self.mul(target, self.log_softmax(logits))), -1.0)
        if reduction == "none":
            return per_sample
        if reduction != "mean":
            raise AutodiffError(f"Unknown reduction: {reduction}")
        return self.mean(per_sample)

    def conv2d(
        self,
        x: Node,
        weight: Node,
        bias: Node,
        image_shape: Tuple[int, int, int],
        kernel_size: int,
    ) -> Node:
        """Valid, stride-1 convolution over flattened images.

        Args:
            x: ``[n, C*H*W]`` images in channel-major order.
            weight: ``[C*k*k, O]`` filters (im2col layout).
            bias: ``[O]``.
            image_shape: ``(C, H, W)``.
            kernel_size: Square kernel extent ``k``.

        Returns:
            ``[n, P*O]`` responses, position-major over the ``P`` output pixels.
        """
        index = patch_index(tuple(image_shape), int(kernel_size))
        positions, patch = index.shape
        if weight.shape[0] != patch:
            raise ShapeMismatchError(f"conv2d: weight {weight.shape} does not match patch size {patch}")
        n = x.shape[0]
        cols = self.reshape(self.gather(x, index.ravel()), (n * positions, patch))
        out = self.add_bias(self.matmul(cols, weight), bias)
        return self.reshape(out, (n, positions * weight.shape[1]))

    def avg_pool2d(self, x: Node, grid: Tuple[int, int], channels: int, size: int) -> Node:
        """Non-overlapping average pooling of position-major ``[n, P*O]`` maps."""
        index = pool_index(int(grid[0]), int(grid[1]), int(channels), int(size))
        n = x.shape[0]
        windows = self.reshape(self.gather(x, index.ravel()), (n * index.shape[0], size * size))
        pooled = self.scale(self.sum_cols(windows), 1.0 / (size * size))
        return self.reshape(pooled, (n, index.shape[0]))

    # -- differentiation ---------------------------------------------------

    def grad(self, loss: Node, wrt: Sequence[Node]) -> List[Node]:
        """Reverse-mode gradient of a scalar ``loss`` w.r.t. ``wrt``.

        The returned nodes belong to this graph, so ``grad`` can be applied
        to expressions built from them. Nodes ``loss`` does not depend on get
        an exact zero gradient.

        Raises:
            AutodiffError: If ``loss`` is not a single element.
        """
        self._own(loss, *wrt)
        if loss.value.size != 1:
            raise AutodiffError(f"grad needs a scalar loss, got shape {loss.shape}")

        targets = {node.id for node in wrt}
        tape = self.nodes[: loss.id + 1]
        reaches = [False] * len(tape)
        for node in tape:
            reaches[node.id] = node.id in targets or any(reaches[i] for i in node.inputs)

        adjoints: Dict[int, Node] = {}
        found: Dict[int, Node] = {}
        if reaches[loss.id]:
            adjoints[loss.id] = self.constant(np.ones_like(loss.value))

        for node in reversed(tape):
            adjoint = adjoints.pop(node.id, None)
            if adjoint is None:
                continue
            if node.id in targets:
                found[node.id] = adjoint
            if not node.inputs:
                continue
            needs = tuple(reaches[i] for i in node.inputs)
            contributions = _BACKWARD[node.op](self, node, adjoint, needs)
            for input_id, needed, contribution in zip(node.inputs, needs, contributions):
                if not needed or contribution is None:
                    continue
                previous = adjoints.get(input_id)
                adjoints[input_id] = contribution if previous is None else self.add(previous, contribution)

        result = []
        for node in wrt:
            adjoint = found.get(node.id)
            result.append(adjoint if adjoint is not None else self.constant(np.zeros_like(node.value)))
        return result


@lru_cache(maxsize=64)
def patch_index(image_shape: Tuple[int, int, int], kernel_size: int) -> NDArray[np.intp]:
    """Flat indices of every ``k x k`` patch, shape ``[P, C*k*k]``."""
    channels, height, width = image_shape
    out_h, out_w = height - kernel_size + 1, width - kernel_size + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"conv2d: kernel {kernel_size} larger than image {image_shape}")
    c = np.arange(channels)[:, None, None]
    di = np.arange(kernel_size)[None, :, None]
    dj = np.arange(kernel_size)[None, None, :]
    offsets = (c * height * width + di * width + dj).ravel()
    base = (np.arange(out_h)[:, None] * width + np.arange(out_w)[None, :]).ravel()
    index = (base[:, None] + offsets[None, :]).astype(np.intp)
    index.setflags(write=False)
    return index


@lru_cache(maxsize=64)
def pool_index(grid_h: int, grid_w: int, channels: int, size: int) -> NDArray[np.intp]:
    """Source indices of each pooling window, shape ``[Q*O, size*size]``."""
    out_h, out_w = grid_h // size, grid_w // size
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"avg_pool2d: window {size} larger than grid {(grid_h, grid_w)}")
    a = np.arange(out_h)[:, None, None, None, None]
    b = np.arange(out_w)[None, :, None, None, None]
    o = np.arange(channels)[None, None, :, None, None]
    u = np.arange(size)[None, None, None, :, None]
    v = np.arange(size)[None, None, None, None, :]
    source = ((a * size + u) * grid_w + (b * size + v)) * channels + o
    index = source.reshape(out_h * out_w * channels, size * size).astype(np.intp)
    index.setflags(write=False)
    return index


def _inputs(graph: Graph, node: Node) -> List[Node]:
    return [graph.nodes[i] for i in node.inputs]


@backward_rule("add")
def _add_backward(g, node, adj, needs):
    return adj, adj


@backward_rule("sub")
def _sub_backward(g, node, adj, needs):
    return adj, (g.scale(adj, -1.0) if needs[1] else None)


@backward_rule("mul")
def _mul_backward(g, node, adj, needs):
    a, b = _inputs(g, node)
    return (g.mul(adj, b) if needs[0] else None), (g.mul(adj, a) if needs[1] else None)


@backward_rule("scale")
def _scale_backward(g, node, adj, needs):
    return (g.scale(adj, node.attrs["factor"]),)


@backward_rule("square")
def _square_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    return (g.mul(adj, g.scale(a, 2.0)),)


@backward_rule("sigmoid")
def _sigmoid_backward(g, node, adj, needs):
    return (g.mul(adj, g.mul(node, g.scale(node, -1.0, 1.0))),)


@backward_rule("tanh")
def _tanh_backward(g, node, adj, needs):
    return (g.mul(adj, g.scale(g.square(node), -1.0, 1.0)),)


@backward_rule("exp")
def _exp_backward(g, node, adj, needs):
    return (g.mul(adj, node),)


@backward_rule("clamp")
def _clamp_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    inside = (a.value > node.attrs["low"]) & (a.value < node.attrs["high"])
    return (g.mul(adj, g.constant(inside.astype(np.float64))),)


@backward_rule("matmul")
def _matmul_backward(g, node, adj, needs):
    a, b = _inputs(g, node)
    grad_a = g.matmul(adj, g.transpose(b)) if needs[0] else None
    grad_b = g.matmul(g.transpose(a), adj) if needs[1] else None
    return grad_a, grad_b


@backward_rule("transpose")
def _transpose_backward(g, node, adj, needs):
    return (g.transpose(adj),)


@backward_rule("add_bias")
def _add_bias_backward(g, node, adj, needs):
    return adj, (g.sum_rows(adj) if needs[1] else None)


@backward_rule("reshape")
def _reshape_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    return (g.reshape(adj, a.shape),)


@backward_rule("gather")
def _gather_backward(g, node, adj, needs):
    return (g.scatter(adj, node.attrs["index"], node.attrs["width"]),)


@backward_rule("scatter")
def _scatter_backward(g, node, adj, needs):
    return (g.gather(adj, node.attrs["index"]),)


@backward_rule("sum")
def _sum_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    return (g.broadcast_scalar(adj, a.shape),)


@backward_rule("broadcast_scalar")
def _broadcast_scalar_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    total = g.sum(adj)
    return (total if total.shape == a.shape else g.reshape(total, a.shape),)


@backward_rule("sum_rows")
def _sum_rows_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    return (g.broadcast_rows(adj, a.shape[0]),)


@backward_rule("broadcast_rows")
def _broadcast_rows_backward(g, node, adj, needs):
    return (g.sum_rows(adj),)


@backward_rule("sum_cols")
def _sum_cols_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    return (g.broadcast_cols(adj, a.shape[1]),)


@backward_rule("broadcast_cols")
def _broadcast_cols_backward(g, node, adj, needs):
    return (g.sum_cols(adj),)


@backward_rule("logsumexp_rows")
def _logsumexp_rows_backward(g, node, adj, needs):
    (a,) = _inputs(g, node)
    cols = a.shape[1]
    probabilities = g.exp(g.sub(a, g.broadcast_cols(node, cols)))
    return (g.mul(g.broadcast_cols(adj, cols), probabilities),)
