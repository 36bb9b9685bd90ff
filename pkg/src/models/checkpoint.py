"""Binary blobs for parameters and raw tensors.

Checkpoint layout (little-endian)::

    b"FEDEMCK1" | u32 header length | ModelSpec JSON | u64 scalar count | f64 scalars

Tensor blob layout::

    b"FEDEMTB1" | u32 ndim | u64 extent per dim | f64 scalars (row-major)
"""

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from pydantic import ValidationError

from src.autodiff import Tensor
from src.models.architectures import Model, ModelSpec
from src.models.parameters import ParameterSet

CHECKPOINT_MAGIC = b"FEDEMCK1"
TENSOR_MAGIC = b"FEDEMTB1"

PathLike = Union[str, Path]


class CheckpointError(Exception):
    """Raised when a blob cannot be written or parsed."""
    pass


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read {path}: {e}") from e


def _scalars(payload: bytes, offset: int, count: int, path: PathLike) -> Tensor:
    expected = offset + 8 * count
    if len(payload) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64)


def save_checkpoint(path: PathLike, spec: ModelSpec, params: ParameterSet) -> Path:
    """Write ``params`` in canonical flattening order, headed by ``spec``."""
    header = spec.describe().encode("utf-8")
    flat = params.flatten()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.astype("<f8").tobytes())
    return path


def load_checkpoint(path: PathLike) -> Tuple[ModelSpec, ParameterSet]:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: On bad magic, truncation, or a scalar count that does
            not match the spec in the header.
    """
    payload = _read(path)
    magic_len = len(CHECKPOINT_MAGIC)
    if payload[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (header_len,) = struct.unpack_from("<I", payload, magic_len)
        start = magic_len + 4
        header = payload[start:start + header_len].decode("utf-8")
        (count,) = struct.unpack_from("<Q", payload, start + header_len)
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated header") from e

    try:
        spec = ModelSpec.model_validate_json(header)
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid model spec header: {e}") from e

    template = ParameterSet.zeros(Model(spec).parameter_shapes())
    if count != template.size:
        raise CheckpointError(f"{path}: {count} scalars, spec needs {template.size}")
    flat = _scalars(payload, start + header_len + 8, count, path)
    return spec, ParameterSet.from_flat(template, flat)


def save_tensor(path: PathLike, tensor: Tensor) -> Path:
    """Write a shape header plus 64-bit scalars."""
    array = np.asarray(tensor, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(np.ascontiguousarray(array).astype("<f8").tobytes())
    return path


def load_tensor(path: PathLike) -> Tensor:
    payload = _read(path)
    magic_len = len(TENSOR_MAGIC)
    if payload[:magic_len] != TENSOR_MAGIC:
        raise CheckpointError(f"{path}: not a tensor blob")
    try:
        (ndim,) = struct.unpack_from("<I", payload, magic_len)
        shape = struct.unpack_from(f"<{ndim}Q", payload, magic_len + 4)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    count = int(np.prod(shape, dtype=np.int64))
    return _scalars(payload, magic_len + 4 + 8 * ndim, count, path).reshape(shape)
