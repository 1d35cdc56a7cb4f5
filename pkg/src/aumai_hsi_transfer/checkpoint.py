"""HSCKPT1 model checkpoints.

Layout: magic ``HSCKPT1``, u32 LE header length, UTF-8 JSON header
``{"spec": ..., "meta": ..., "tensors": {name: {shape, dtype, offset}}}``,
then the raw little-endian tensor payloads in directory order. Offsets are
relative to the first payload byte.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Final

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict

from aumai_hsi_transfer.autodiff_nn import Params, param_shapes, parse_key, tensor_key
from aumai_hsi_transfer.errors import FormatError, IoError, LengthError, ShapeError
from aumai_hsi_transfer.models import CheckpointMeta, ModelSpec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC: Final = b"HSCKPT1"
_U32 = struct.Struct("<I")
_DTYPES: Final = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spec: ModelSpec
    params: Params
    meta: CheckpointMeta | None = None


def _dtype_tag(array: np.ndarray) -> str:
    if array.dtype == np.float32:
        return "f4"
    if array.dtype == np.float64:
        return "f8"
    raise FormatError(f"unsupported tensor dtype {array.dtype}")


def encode_checkpoint(
    spec: ModelSpec, params: Params, meta: CheckpointMeta | None = None
) -> bytes:
    """Serialize spec, params and optional meta to HSCKPT1 bytes."""
    directory: dict[str, dict[str, Any]] = {}
    payloads: list[bytes] = []
    offset = 0
    for key, array in params.named_tensors():
        tag = _dtype_tag(array)
        raw = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()
        directory[key] = {"shape": list(array.shape), "dtype": tag, "offset": offset}
        payloads.append(raw)
        offset += len(raw)
    header = {
        "spec": spec.model_dump(mode="json"),
        "meta": None if meta is None else meta.model_dump(mode="json"),
        "tensors": directory,
    }
    raw_header = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, _U32.pack(len(raw_header)), raw_header, *payloads])


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse and validate HSCKPT1 bytes."""
    magic_len = len(CHECKPOINT_MAGIC)
    if data[:magic_len] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad magic {data[:magic_len]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    if len(data) < magic_len + 4:
        raise LengthError("truncated HSCKPT1 header")
    (header_len,) = _U32.unpack_from(data, magic_len)
    start = magic_len + 4 + header_len
    if len(data) < start:
        raise LengthError(f"header declares {header_len} bytes, file ends early")
    try:
        header = json.loads(data[magic_len + 4 : start].decode("utf-8"))
        spec = ModelSpec.model_validate(header["spec"])
        meta = None if header.get("meta") is None else CheckpointMeta.model_validate(header["meta"])
        directory: dict[str, dict[str, Any]] = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed HSCKPT1 header: {exc}") from exc
    except pydantic.ValidationError as exc:
        raise FormatError(f"checkpoint holds an invalid model spec: {exc}") from exc

    expected = param_shapes(spec)
    expected_keys = [
        tensor_key(index, name) for index, shapes in enumerate(expected) for name in shapes
    ]
    if list(directory) != expected_keys:
        raise ShapeError(
            f"tensor directory {list(directory)} does not match the model's {expected_keys}"
        )

    layers: list[dict[str, Any]] = [{} for _ in expected]
    payload = memoryview(data)[start:]
    cursor = 0
    for key, entry in directory.items():
        index, name = parse_key(key)
        shape = tuple(int(d) for d in entry["shape"])
        if shape != expected[index][name]:
            raise ShapeError(
                f"tensor {key} stored as {shape}, spec implies {expected[index][name]}"
            )
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"tensor {key} has unknown dtype {entry['dtype']!r}")
        size = math.prod(shape) * dtype.itemsize
        if int(entry["offset"]) != cursor:
            raise FormatError(
                f"tensor {key} offset {entry['offset']} out of order, expected {cursor}"
            )
        if cursor + size > len(payload):
            raise LengthError(f"payload ends inside tensor {key}")
        array = np.frombuffer(payload, dtype=dtype, count=math.prod(shape), offset=cursor)
        layers[index][name] = array.reshape(shape).astype(dtype.newbyteorder("="))
        cursor += size
    if cursor != len(payload):
        raise LengthError(f"{len(payload) - cursor} trailing bytes after the last tensor")
    return Checkpoint(spec=spec, params=Params(layers=layers), meta=meta)


def save_checkpoint(
    spec: ModelSpec,
    params: Params,
    path: str | Path,
    meta: CheckpointMeta | None = None,
) -> None:
    """Write an HSCKPT1 file."""
    data = encode_checkpoint(spec, params, meta)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("wrote checkpoint %s (%d bytes)", path, len(data))


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Read an HSCKPT1 file, keeping its meta."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, Params]:
    """Read an HSCKPT1 file as ``(spec, params)``."""
    checkpoint = read_checkpoint(path)
    return checkpoint.spec, checkpoint.params


__all__ = [
    "CHECKPOINT_MAGIC",
    "Checkpoint",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
]
