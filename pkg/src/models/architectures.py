"""Predictive models f_θ: sigmoid/tanh MLP and a tiny CNN."""

from enum import Enum
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.autodiff import Graph, Node, Tensor
from src.models.parameters import GradientVector, ModelError, ParameterSet


class Architecture(str, Enum):
    """Available model families."""
    MLP = "mlp"
    TINY_CNN = "tiny_cnn"


class Activation(str, Enum):
    """Twice-differentiable activations (the attack differentiates through them twice)."""
    SIGMOID = "sigmoid"
    TANH = "tanh"


class ModelSpec(BaseModel):
    """Architecture description.

    For ``mlp``, ``layer_widths`` lists every layer including the flattened
    input and the class layer, e.g. ``[784, 256, 10]``. For ``tiny_cnn`` it
    lists the fully connected layers after pooling, e.g. ``[64, 10]``.
    """

    architecture: Architecture = Architecture.MLP
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    num_classes: int = Field(default=10, ge=2)
    layer_widths: List[int] = Field(default_factory=lambda: [784, 256, 10])
    activation: Activation = Activation.SIGMOID
    conv_channels: int = Field(default=8, ge=1)
    kernel_size: int = Field(default=5, ge=1)
    pool_size: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _check_widths(self) -> "ModelSpec":
        if any(w <= 0 for w in self.layer_widths) or any(d <= 0 for d in self.input_shape):
            raise ValueError("layer widths and input extents must be positive")
        if not self.layer_widths or self.layer_widths[-1] != self.num_classes:
            raise ValueError(f"final width must equal num_classes ({self.num_classes})")
        if self.architecture == Architecture.MLP:
            if len(self.layer_widths) < 2:
                raise ValueError("an MLP needs at least input and output widths")
            if self.layer_widths[0] != self.input_dim:
                raise ValueError(
                    f"first MLP width {self.layer_widths[0]} must equal input size {self.input_dim}"
                )
        else:
            grid = self.conv_grid
            if grid[0] < self.pool_size or grid[1] < self.pool_size:
                raise ValueError(f"input {self.input_shape} too small for kernel and pool")
        return self

    @property
    def input_dim(self) -> int:
        channels, height, width = self.input_shape
        return channels * height * width

    @property
    def conv_grid(self) -> Tuple[int, int]:
        _, height, width = self.input_shape
        return height - self.kernel_size + 1, width - self.kernel_size + 1

    @property
    def pooled_dim(self) -> int:
        grid_h, grid_w = self.conv_grid
        return (grid_h // self.pool_size) * (grid_w // self.pool_size) * self.conv_channels

    def describe(self) -> str:
        """Canonical spec string (stored in checkpoint headers)."""
        return self.model_dump_json()


def flatten_batch(x: Tensor, spec: ModelSpec) -> Tensor:
    """Reshape a single image or a batch to ``[n, input_dim]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(spec.input_shape):
        x = x[None]
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != spec.input_dim:
        raise ModelError(f"Input shape {x.shape} does not match model input {spec.input_shape}")
    return x.reshape(x.shape[0], spec.input_dim)


class Model:
    """Graph builder for one ``ModelSpec``.

    Attributes:
        spec: Architecture description.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Parameter names and shapes in canonical (declaration) order."""
        spec = self.spec
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        if spec.architecture == Architecture.MLP:
            widths = spec.layer_widths
        else:
            channels = spec.input_shape[0]
            patch = channels * spec.kernel_size * spec.kernel_size
            shapes.append(("conv.weight", (patch, spec.conv_channels)))
            shapes.append(("conv.bias", (spec.conv_channels,)))
            widths = [spec.pooled_dim] + list(spec.layer_widths)
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes.append((f"fc{i}.weight", (fan_in, fan_out)))
            shapes.append((f"fc{i}.bias", (fan_out,)))
        return shapes

    def init_params(self, seed: int) -> ParameterSet:
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
        rng = np.random.default_rng(seed)
        items = []
        for name, shape in self.parameter_shapes():
            if name.endswith(".bias"):
                items.append((name, np.zeros(shape)))
            else:
                bound = 1.0 / np.sqrt(shape[0])
                items.append((name, rng.uniform(-bound, bound, size=shape)))
        return ParameterSet(items)

    def bind(self, graph: Graph, params: ParameterSet, requires_grad: bool = False) -> Dict[str, Node]:
        """Record every parameter as a leaf of ``graph``."""
        expected = self.parameter_shapes()
        if [(n, s) for n, s in zip(params.names, params.shapes)] != expected:
            raise ModelError(f"Parameters {params!r} do not match {self.spec.architecture.value} spec")
        return {
            name: graph.leaf(value, requires_grad=requires_grad, name=name)
            for name, value in params.items()
        }

    def _activate(self, graph: Graph, h: Node) -> Node:
        if self.spec.activation == Activation.TANH:
            return graph.tanh(h)
        return graph.sigmoid(h)

    def _dense_stack(self, graph: Graph, nodes: Dict[str, Node], h: Node) -> Tuple[Node, Node]:
        """Run the fully connected layers; return (penultimate, logits)."""
        layers = sum(1 for name in nodes if name.startswith("fc") and name.endswith(".weight"))
        features = h
        for i in range(layers):
            h = graph.add_bias(graph.matmul(h, nodes[f"fc{i}.weight"]), nodes[f"fc{i}.bias"])
            if i < layers - 1:
                h = self._activate(graph, h)
                features = h
        return features, h

    def forward(self, graph: Graph, nodes: Dict[str, Node], x: Node) -> Tuple[Node, Node]:
        """Build ``(penultimate features, logits)`` for flattened inputs ``x``."""
        spec = self.spec
        if x.shape[-1] != spec.input_dim or len(x.shape) != 2:
            raise ModelError(f"Expected flattened inputs [n, {spec.input_dim}], got {x.shape}")
        if spec.architecture == Architecture.TINY_CNN:
            h = graph.conv2d(x, nodes["conv.weight"], nodes["conv.bias"], spec.input_shape, spec.kernel_size)
            h = self._activate(graph, h)
            x = graph.avg_pool2d(h, spec.conv_grid, spec.conv_channels, spec.pool_size)
        return self._dense_stack(graph, nodes, x)

    def logits(self, graph: Graph, nodes: Dict[str, Node], x: Node) -> Node:
        return self.forward(graph, nodes, x)[1]

    def loss(
        self,
        graph: Graph,
        nodes: Dict[str, Node],
        x: Node,
        target: Union[Node, Sequence[int], np.ndarray],
    ) -> Node:
        """Mean softmax cross-entropy; ``target`` is labels or soft probabilities."""
        if not isinstance(target, Node):
            labels = np.asarray(target)
            if labels.size and (labels.min() < 0 or labels.max() >= self.spec.num_classes):
                raise ModelError(f"Labels outside [0, {self.spec.num_classes})")
        return graph.softmax_cross_entropy(self.logits(graph, nodes, x), target)

    def forward_loss(self, params: ParameterSet, x: Tensor, y: Sequence[int], requires_grad: bool = True) -> Node:
        """Loss node on a fresh graph; parameter leaves are its first nodes, in canonical order."""
        graph = Graph()
        nodes = self.bind(graph, params, requires_grad=requires_grad)
        inputs = graph.constant(flatten_batch(x, self.spec))
        return self.loss(graph, nodes, inputs, np.asarray(y))

    def gradient(self, params: ParameterSet, x: Tensor, y: Sequence[int]) -> Tuple[GradientVector, float]:
        """Gradient of the mean loss w.r.t. every parameter, plus the loss value."""
        loss = self.forward_loss(params, x, y)
        leaves = loss.graph.nodes[: len(params)]
        grads = loss.graph.grad(loss, leaves)
        return GradientVector(zip(params.names, (g.value for g in grads))), loss.item()

    def penultimate_features(self, params: ParameterSet, x: Tensor) -> Tensor:
        """Activations of the last hidden layer, ``[n, width]``."""
        graph = Graph()
        nodes = self.bind(graph, params)
        features, _ = self.forward(graph, nodes, graph.constant(flatten_batch(x, self.spec)))
        return features.value

    def predict_logits(self, params: ParameterSet, x: Tensor, batch_size: int = 2048) -> Tensor:
        flat = flatten_batch(x, self.spec)
        chunks = []
        for start in range(0, flat.shape[0], batch_size):
            graph = Graph()
            nodes = self.bind(graph, params)
            chunks.append(self.logits(graph, nodes, graph.constant(flat[start:start + batch_size])).value)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.spec.num_classes))

    def predict(self, params: ParameterSet, x: Tensor, batch_size: int = 2048) -> np.ndarray:
        """Argmax class per sample; ties go to the lowest class index."""
        return np.argmax(self.predict_logits(params, x, batch_size), axis=1)


def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
    """Deterministic parameter initialisation for ``spec``."""
    return Model(spec).init_params(seed)


def forward_loss(spec: ModelSpec, params: ParameterSet, x: Tensor, y: Sequence[int]) -> Node:
    return Model(spec).forward_loss(params, x, y)


def penultimate_features(spec: ModelSpec, params: ParameterSet, x: Tensor) -> Tensor:
    return Model(spec).penultimate_features(params, x)
