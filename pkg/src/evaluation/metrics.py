"""Utility and privacy metrics.

Privacy metrics compare images in de-normalized ``[0, 1]`` pixel space with
MAX = 1.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.signal import convolve2d

from src.autodiff import Tensor
from src.models import Model, ParameterSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRIC_COLUMNS = ["test_acc", "val_acc", "test_mse", "fea_mse", "ssim", "psnr"]


class MetricError(Exception):
    """Raised when metric inputs are incompatible."""
    pass


@dataclass
class MetricReport:
    """Table row: accuracies plus reconstruction metrics averaged over attacked images."""

    test_acc: float
    val_acc: float
    test_mse: float = math.nan
    fea_mse: float = math.nan
    ssim: float = math.nan
    psnr: float = math.nan
    images: int = 0

    def to_dict(self) -> dict:
        """Convert to dictionary for logging."""
        return {
            "test_acc": self.test_acc,
            "val_acc": self.val_acc,
            "test_mse": self.test_mse,
            "fea_mse": self.fea_mse,
            "ssim": self.ssim,
            "psnr": self.psnr,
            "images": self.images,
        }


@dataclass
class ImageScores:
    """Reconstruction metrics of one attacked image."""

    client_id: int
    index: int
    mse: float
    fea_mse: float
    ssim: float
    psnr: float
    matching_loss: float = math.nan
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "index": self.index,
            "mse": self.mse,
            "fea_mse": self.fea_mse,
            "ssim": self.ssim,
            "psnr": self.psnr,
            "matching_loss": self.matching_loss,
            **self.extra,
        }


def accuracy_from_predictions(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if labels.size == 0:
        raise MetricError("accuracy of an empty dataset")
    if predictions.shape != labels.shape:
        raise MetricError(f"{predictions.shape} predictions for {labels.shape} labels")
    return float(np.mean(predictions == labels))


def accuracy(model: Model, theta: ParameterSet, inputs: Tensor, labels: Sequence[int]) -> float:
    """Argmax accuracy on normalized ``inputs`` (ties go to the lowest class)."""
    if len(labels) == 0:
        raise MetricError("accuracy of an empty dataset")
    return accuracy_from_predictions(model.predict(theta, inputs), labels)


def _check_shapes(a: Tensor, b: Tensor) -> None:
    if np.shape(a) != np.shape(b):
        raise MetricError(f"Shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def mse(a: Tensor, b: Tensor) -> float:
    """Mean squared difference over all elements."""
    _check_shapes(a, b)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))


def feature_mse(model: Model, theta: ParameterSet, original: Tensor, reconstruction: Tensor) -> float:
    """MSE between penultimate activations of two normalized model inputs."""
    _check_shapes(original, reconstruction)
    return mse(
        model.penultimate_features(theta, original),
        model.penultimate_features(theta, reconstruction),
    )


@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Normalized 2-D Gaussian kernel."""
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    window /= window.sum()
    window.setflags(write=False)
    return window


def _ssim_plane(a: Tensor, b: Tensor, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        # One window covering the whole image.
        mu_a, mu_b = a.mean(), b.mean()
        var_a, var_b = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
    else:
        window = gaussian_window()

        def filt(x: Tensor) -> Tensor:
            return convolve2d(x, window, mode="valid")

        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a * mu_a
        var_b = filt(b * b) - mu_b * mu_b
        cov = filt(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map))


def ssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> float:
    """Mean structural similarity of one image (``[H, W]`` or ``[C, H, W]``).

    Channels are scored separately and averaged. Images smaller than the
    11x11 window use global statistics.
    """
    _check_shapes(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise MetricError(f"ssim expects [H, W] or [C, H, W], got {a.shape}")
    return float(np.mean([_ssim_plane(a[c], b[c], data_range) for c in range(a.shape[0])]))


def psnr(a: Tensor, b: Tensor, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / error)


def _mean(values: List[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def summarize(test_acc: float, val_acc: float, scores: Optional[Sequence[ImageScores]] = None) -> MetricReport:
    """Average per-image scores into one MetricReport.

    PSNR is averaged over finite values only; it is ``inf`` when every
    reconstruction is exact.
    """
    scores = list(scores or [])
    if not scores:
        return MetricReport(test_acc=test_acc, val_acc=val_acc)
    psnrs = [s.psnr for s in scores]
    finite = [p for p in psnrs if math.isfinite(p)]
    return MetricReport(
        test_acc=test_acc,
        val_acc=val_acc,
        test_mse=_mean([s.mse for s in scores]),
        fea_mse=_mean([s.fea_mse for s in scores]),
        ssim=_mean([s.ssim for s in scores]),
        psnr=float(np.mean(finite)) if finite else math.inf,
        images=len(scores),
    )
