"""Utility and privacy metrics, plus MLflow tracking."""

from src.evaluation.metrics import (
    METRIC_COLUMNS,
    ImageScores,
    MetricError,
    MetricReport,
    accuracy,
    accuracy_from_predictions,
    feature_mse,
    gaussian_window,
    mse,
    psnr,
    ssim,
    summarize,
)
from src.evaluation.tracker import ExperimentTracker, flatten_params

__all__ = [
    # Metrics
    "METRIC_COLUMNS",
    "MetricReport",
    "ImageScores",
    "MetricError",
    "accuracy",
    "accuracy_from_predictions",
    "mse",
    "feature_mse",
    "gaussian_window",
    "ssim",
    "psnr",
    "summarize",
    # Tracker
    "ExperimentTracker",
    "flatten_params",
]
