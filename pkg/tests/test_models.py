"""Tests for models module."""

from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from src.autodiff import grad_check
from src.models import (
    Architecture,
    CheckpointError,
    GradientVector,
    Model,
    ModelError,
    ModelSpec,
    ParameterSet,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)


# Fixtures
@pytest.fixture
def mlp():
    return Model(ModelSpec(input_shape=(1, 2, 2), num_classes=3, layer_widths=[4, 5, 3]))


@pytest.fixture
def cnn():
    return Model(
        ModelSpec(
            architecture=Architecture.TINY_CNN,
            input_shape=(1, 6, 6),
            num_classes=2,
            layer_widths=[2],
            conv_channels=2,
            kernel_size=3,
            pool_size=2,
        )
    )


# Spec Tests
class TestModelSpec:
    """Validation of architecture descriptions."""

    def test_default_is_mnist_mlp(self):
        spec = ModelSpec()
        assert spec.input_dim == 784
        assert spec.layer_widths[-1] == spec.num_classes

    def test_first_width_must_match_input(self):
        with pytest.raises(ValidationError):
            ModelSpec(input_shape=(1, 2, 2), num_classes=2, layer_widths=[5, 2])

    def test_last_width_must_match_classes(self):
        with pytest.raises(ValidationError):
            ModelSpec(input_shape=(1, 2, 2), num_classes=3, layer_widths=[4, 2])

    def test_cnn_pooled_dim(self, cnn):
        # 6x6 input, 3x3 kernel -> 4x4 grid, pooled 2x2, 2 channels
        assert cnn.spec.conv_grid == (4, 4)
        assert cnn.spec.pooled_dim == 8


class TestModel:
    """Forward pass, gradients and initialization."""

    def test_parameter_order(self, mlp):
        names = [n for n, _ in mlp.parameter_shapes()]
        assert names == ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]

    def test_init_is_deterministic(self, mlp):
        assert mlp.init_params(3).equals(mlp.init_params(3))
        assert not mlp.init_params(3).equals(mlp.init_params(4))

    def test_init_biases_zero(self, mlp):
        theta = mlp.init_params(0)
        np.testing.assert_array_equal(theta["fc1.bias"], 0.0)

    def test_gradient_matches_finite_differences(self, mlp):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(3, 1, 2, 2))
        y = np.array([0, 2, 1])
        names = [n for n, _ in mlp.parameter_shapes()]

        def loss(graph, leaves):
            return mlp.loss(graph, dict(zip(names, leaves)), graph.constant(x.reshape(3, 4)), y)

        assert grad_check(loss, mlp.init_params(0).values()) < 1e-4

    def test_cnn_gradient_matches_finite_differences(self, cnn):
        rng = np.random.default_rng(2)
        x = rng.uniform(size=(2, 1, 6, 6))
        y = np.array([1, 0])
        names = [n for n, _ in cnn.parameter_shapes()]

        def loss(graph, leaves):
            return cnn.loss(graph, dict(zip(names, leaves)), graph.constant(x.reshape(2, 36)), y)

        assert grad_check(loss, cnn.init_params(0).values()) < 1e-4

    def test_gradient_returns_named_vector(self, mlp):
        template = mlp.init_params(0)
        zeros = ParameterSet.from_flat(template, np.zeros(template.size))
        g, loss = mlp.gradient(zeros, np.zeros((2, 1, 2, 2)), [0, 1])
        assert isinstance(g, GradientVector)
        assert g.names == [n for n, _ in mlp.parameter_shapes()]
        assert loss == pytest.approx(np.log(3.0))

    def test_loss_invariant_to_batch_order(self, mlp):
        theta = mlp.init_params(2)
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(5, 1, 2, 2))
        y = np.array([0, 2, 1, 1, 0])
        order = np.array([3, 0, 4, 2, 1])
        g, loss = mlp.gradient(theta, x, y)
        g_shuffled, loss_shuffled = mlp.gradient(theta, x[order], y[order])
        assert loss_shuffled == pytest.approx(loss, rel=1e-12)
        np.testing.assert_allclose(g_shuffled.flatten(), g.flatten(), rtol=1e-10, atol=1e-15)

    def test_labels_out_of_range(self, mlp):
        with pytest.raises(ModelError):
            mlp.gradient(mlp.init_params(0), np.zeros((1, 4)), [3])

    def test_bind_rejects_foreign_parameters(self, mlp, cnn):
        with pytest.raises(ModelError):
            mlp.gradient(cnn.init_params(0), np.zeros((1, 4)), [0])

    def test_predict_shape(self, cnn):
        predictions = cnn.predict(cnn.init_params(0), np.zeros((5, 1, 6, 6)))
        assert predictions.shape == (5,)

    def test_penultimate_features_width(self, mlp):
        features = mlp.penultimate_features(mlp.init_params(0), np.zeros((2, 4)))
        assert features.shape == (2, 5)


class TestParameterSet:
    """Named tensor collections."""

    def test_flatten_roundtrip(self, mlp):
        theta = mlp.init_params(0)
        rebuilt = ParameterSet.from_flat(theta, theta.flatten())
        assert rebuilt.equals(theta)

    def test_step(self):
        theta = ParameterSet([("w", np.array([1.0, 2.0]))])
        g = GradientVector([("w", np.array([10.0, -10.0]))])
        np.testing.assert_allclose(theta.step(g, 0.1)["w"], [0.0, 3.0])

    def test_step_rejects_other_layout(self):
        theta = ParameterSet([("w", np.zeros(2))])
        with pytest.raises(ModelError):
            theta.step(GradientVector([("v", np.zeros(2))]), 0.1)

    def test_zeros_follow_layout(self, mlp):
        zeros = ParameterSet.zeros(mlp.parameter_shapes())
        assert list(zip(zeros.names, zeros.shapes)) == mlp.parameter_shapes()
        assert not zeros.flatten().any()

    def test_norm(self):
        g = GradientVector([("a", np.array([3.0])), ("b", np.array([[4.0]]))])
        assert g.norm() == pytest.approx(5.0)


class TestCheckpoint:
    """Binary checkpoint and tensor blobs."""

    def test_checkpoint_roundtrip(self, cnn, tmp_path):
        theta = cnn.init_params(5)
        path = save_checkpoint(tmp_path / "model.ckpt", cnn.spec, theta)
        spec, loaded = load_checkpoint(path)
        assert spec == cnn.spec
        assert loaded.equals(theta)

    def test_load_builds_template_from_shapes(self, mlp, tmp_path):
        theta = mlp.init_params(4)
        path = save_checkpoint(tmp_path / "model.ckpt", mlp.spec, theta)
        with patch.object(Model, "init_params", side_effect=AssertionError("initialised")):
            _, loaded = load_checkpoint(path)
        assert loaded.equals(theta)

    def test_checkpoint_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_checkpoint_truncated(self, mlp, tmp_path):
        path = save_checkpoint(tmp_path / "model.ckpt", mlp.spec, mlp.init_params(0))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_tensor_roundtrip(self, tmp_path):
        tensor = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
        loaded = load_tensor(save_tensor(tmp_path / "t.bin", tensor))
        np.testing.assert_array_equal(loaded, tensor)
