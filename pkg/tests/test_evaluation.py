"""Tests for evaluation module."""

import math
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from src.evaluation import (
    ExperimentTracker,
    ImageScores,
    MetricError,
    MetricReport,
    accuracy,
    accuracy_from_predictions,
    feature_mse,
    flatten_params,
    gaussian_window,
    mse,
    psnr,
    ssim,
    summarize,
)
from src.federation import RoundRecord
from src.models import Model, ModelSpec


# Fixtures
@pytest.fixture
def model():
    return Model(ModelSpec(input_shape=(1, 2, 2), num_classes=2, layer_widths=[4, 3, 2]))


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(size=(1, 16, 16))


@pytest.fixture
def scores():
    return [
        ImageScores(0, 0, mse=0.1, fea_mse=0.2, ssim=0.5, psnr=10.0),
        ImageScores(1, 0, mse=0.3, fea_mse=0.4, ssim=0.7, psnr=math.inf),
    ]


# Metrics Tests
class TestAccuracy:
    """Utility metrics."""

    def test_fraction_of_matches(self):
        assert accuracy_from_predictions([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75

    def test_empty_is_an_error(self):
        with pytest.raises(MetricError):
            accuracy_from_predictions([], [])

    def test_model_accuracy_in_unit_range(self, model):
        x = np.random.default_rng(0).uniform(size=(10, 4))
        acc = accuracy(model, model.init_params(0), x, np.arange(10) % 2)
        assert 0.0 <= acc <= 1.0


class TestImageMetrics:
    """Reconstruction metrics."""

    def test_mse(self):
        assert mse(np.array([0.0, 1.0]), np.array([1.0, 1.0])) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            mse(np.zeros(3), np.zeros(4))

    def test_psnr_known_value(self):
        assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)

    def test_psnr_identical_is_infinite(self, image):
        assert psnr(image, image) == math.inf

    def test_ssim_identical(self, image):
        assert ssim(image, image) == pytest.approx(1.0)

    def test_ssim_drops_with_noise(self, image):
        noisy = np.clip(image + np.random.default_rng(1).normal(scale=0.2, size=image.shape), 0, 1)
        assert ssim(image, noisy) < 0.9

    def test_ssim_small_images_use_global_statistics(self):
        a = np.full((1, 4, 4), 0.2)
        b = np.full((1, 4, 4), 0.7)
        c1 = 0.01 ** 2
        assert ssim(a, b) == pytest.approx((2 * 0.2 * 0.7 + c1) / (0.2 ** 2 + 0.7 ** 2 + c1))

    def test_ssim_averages_channels(self, image):
        rgb = np.concatenate([image, image, 1 - image])
        assert ssim(rgb, rgb) == pytest.approx(1.0)

    def test_gaussian_window_normalized(self):
        window = gaussian_window()
        assert window.shape == (11, 11)
        assert window.sum() == pytest.approx(1.0)

    def test_feature_mse_zero_for_same_input(self, model):
        x = np.random.default_rng(0).uniform(size=(1, 4))
        assert feature_mse(model, model.init_params(0), x, x) == 0.0


class TestSummarize:
    """Per-run aggregation."""

    def test_no_attack_leaves_nan(self):
        report = summarize(0.9, 0.8)
        assert report.images == 0
        assert math.isnan(report.test_mse)

    def test_means_and_finite_psnr(self, scores):
        report = summarize(0.9, 0.8, scores)
        assert report.test_mse == pytest.approx(0.2)
        assert report.ssim == pytest.approx(0.6)
        assert report.psnr == 10.0
        assert report.images == 2

    def test_report_to_dict(self):
        data = MetricReport(test_acc=0.5, val_acc=0.25).to_dict()
        assert data["test_acc"] == 0.5 and data["images"] == 0

    def test_scores_to_dict_includes_extra(self):
        row = ImageScores(2, 1, 0.1, 0.1, 0.9, 30.0, extra={"round": 4}).to_dict()
        assert row["round"] == 4 and row["client_id"] == 2


# Tracker Tests
class TestExperimentTracker:
    """Tests for MLflow experiment tracker."""

    @patch("src.evaluation.tracker.mlflow")
    @patch("src.evaluation.tracker.MlflowClient")
    def test_init_creates_experiment(self, mock_client_class, mock_mlflow):
        mock_client = MagicMock()
        mock_client.get_experiment_by_name.return_value = None
        mock_client.create_experiment.return_value = "exp-123"
        mock_client_class.return_value = mock_client

        tracker = ExperimentTracker(experiment_name="test-exp")

        assert tracker.experiment_name == "test-exp"
        mock_client.create_experiment.assert_called_once_with("test-exp")

    @patch("src.evaluation.tracker.mlflow")
    @patch("src.evaluation.tracker.MlflowClient")
    def test_start_and_end_run(self, mock_client_class, mock_mlflow):
        mock_client = MagicMock()
        mock_client.get_experiment_by_name.return_value = MagicMock(experiment_id="exp-123")
        mock_client_class.return_value = mock_client

        mock_run = MagicMock()
        mock_run.info.run_id = "run-456"
        mock_mlflow.start_run.return_value = mock_run

        tracker = ExperimentTracker()
        run_id = tracker.start_run(run_name="test-run")

        assert run_id == "run-456"
        assert tracker.run_id == "run-456"
        tracker.end_run("FAILED")
        mock_mlflow.end_run.assert_called_once_with(status="FAILED")
        assert tracker.run_id is None

    @patch("src.evaluation.tracker.mlflow")
    @patch("src.evaluation.tracker.MlflowClient")
    def test_log_round_uses_round_as_step(self, mock_client_class, mock_mlflow):
        mock_client_class.return_value = MagicMock()
        tracker = ExperimentTracker()

        tracker.log_round(RoundRecord(7, [0], {0: 2.0}, 0.5, 0.4, 0.3))

        metrics = mock_mlflow.log_metrics.call_args.args[0]
        assert metrics["grad_norm_mean"] == 2.0
        assert mock_mlflow.log_metrics.call_args.kwargs["step"] == 7

    @patch("src.evaluation.tracker.mlflow")
    @patch("src.evaluation.tracker.MlflowClient")
    def test_log_report_skips_non_finite(self, mock_client_class, mock_mlflow):
        mock_client_class.return_value = MagicMock()
        tracker = ExperimentTracker()

        tracker.log_report(MetricReport(test_acc=0.9, val_acc=0.8))

        logged = mock_mlflow.log_metrics.call_args.args[0]
        assert logged == {"test_acc": 0.9, "val_acc": 0.8, "images": 0.0}

    @patch("src.evaluation.tracker.mlflow")
    @patch("src.evaluation.tracker.MlflowClient")
    def test_log_manifest_flattens(self, mock_client_class, mock_mlflow):
        mock_client_class.return_value = MagicMock()
        tracker = ExperimentTracker()

        tracker.log_manifest({"seed": 1, "defense": {"method": "fedem", "fedem": {"rho_max": 8.0}}})

        mock_mlflow.log_params.assert_called_once_with(
            {"seed": "1", "defense.method": "fedem", "defense.fedem.rho_max": "8.0"}
        )

    def test_flatten_params(self):
        assert flatten_params({"a": {"b": [1, 2]}}) == {"a.b": "[1, 2]"}
