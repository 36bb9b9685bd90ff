"""Reconstruction dumps: PGM/PPM images, montages and loss traces."""

import logging
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from PIL import Image

from src.attack.dlg import AttackOutcome
from src.autodiff import Tensor
from src.data.transforms import NormalizationTransform, denormalize

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["round", "client_id", "slot", "restart", "iteration", "loss"]


def to_uint8(pixels: Tensor) -> np.ndarray:
    """``[0, 1]`` pixels to rounded 8-bit values, clamped to ``[0, 255]``."""
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def _hwc(image: Tensor) -> np.ndarray:
    """``[C, H, W]`` to what Pillow expects: ``[H, W]`` for grey, ``[H, W, 3]`` for RGB."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"Expected a [1|3, H, W] image, got {image.shape}")
    return image[0] if image.shape[0] == 1 else np.transpose(image, (1, 2, 0))


def image_suffix(image: Tensor) -> str:
    return ".pgm" if np.shape(image)[0] == 1 else ".ppm"


def save_image(path: Path, image: Tensor) -> Path:
    """Write one ``[C, H, W]`` image in ``[0, 1]`` as binary PGM (1 channel) or PPM (3)."""
    path = Path(path).with_suffix(image_suffix(image))
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(_hwc(image))).save(path)
    return path


def montage(originals: Sequence[Tensor], reconstructions: Sequence[Tensor], pad: int = 1) -> np.ndarray:
    """Two-row grid, originals over reconstructions, as ``[C, H', W']`` pixels."""
    if len(originals) != len(reconstructions) or not originals:
        raise ValueError("montage needs matching, non-empty image lists")
    channels, height, width = np.shape(originals[0])
    cols = len(originals)
    grid = np.ones((channels, 2 * height + pad, cols * width + (cols - 1) * pad))
    for row, images in enumerate((originals, reconstructions)):
        for col, image in enumerate(images):
            top = row * (height + pad)
            left = col * (width + pad)
            grid[:, top:top + height, left:left + width] = image
    return grid


def export_round(
    outcomes: Dict[int, List[AttackOutcome]],
    transform: NormalizationTransform,
    directory: Path,
) -> Dict[str, Path]:
    """Dump originals, reconstructions, a montage and the loss traces of one attacked round.

    File names are ``r{round}_c{client}_s{slot}_i{index}_{orig|recon}.pgm``.

    Returns:
        Paths of the montage and the trace CSV.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    originals: List[Tensor] = []
    reconstructions: List[Tensor] = []
    traces = []
    round_index = None
    for client_id in sorted(outcomes):
        for outcome in outcomes[client_id]:
            round_index = outcome.round
            recon = denormalize(transform, outcome.result.x_hat)
            for i, (original, image) in enumerate(zip(outcome.originals, recon)):
                stem = f"r{outcome.round:04d}_c{client_id}_s{outcome.slot}_i{i}"
                save_image(directory / f"{stem}_orig", original)
                save_image(directory / f"{stem}_recon", image)
                originals.append(original)
                reconstructions.append(image)
            for restart, trace in enumerate(outcome.result.traces):
                for iteration, loss in enumerate(trace):
                    traces.append((outcome.round, client_id, outcome.slot, restart, iteration, loss))

    paths = {}
    if originals:
        paths["montage"] = save_image(
            directory / f"r{round_index:04d}_montage", montage(originals, reconstructions)
        )
    trace_name = f"r{round_index:04d}_traces.csv" if round_index is not None else "traces.csv"
    trace_path = directory / trace_name
    pd.DataFrame(traces, columns=TRACE_COLUMNS).to_csv(trace_path, index=False, float_format="%.10g")
    paths["traces"] = trace_path
    logger.info("Wrote %d reconstructions to %s", len(reconstructions), directory)
    return paths
