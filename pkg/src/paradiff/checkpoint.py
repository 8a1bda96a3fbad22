"""Checkpoint files: a readable JSON header followed by raw little-endian float32 tensors.

Layout:

    PARADIFF-CKPT 1\\n
    <header size in bytes, decimal>\\n
    <JSON header: config, tensor directory (name, shape, offset, nbytes), metadata>
    <tensor data, in directory order, offsets relative to the first data byte>
"""

from __future__ import annotations

import dataclasses
import json
import logging

from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from paradiff.helpers.config import dataclass_to_table
from paradiff.helpers.constants import CHECKPOINT_MAGIC
from paradiff.helpers.exceptions import CheckpointFormatError, ConfigError
from paradiff.model import ModelConfig, ModelParams

_logger = logging.getLogger(__name__)

_DATA_TYPE = "<f4"


@dataclasses.dataclass
class Checkpoint:
    """Parameters loaded from a checkpoint file with the metadata stored next to them."""

    params: ModelParams
    metadata: Dict[str, Any]


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write parameters to a checkpoint file.

    Args:
        path: The file to create, parent directories are created as needed.
        params: The parameters, stored as float32.
        metadata: JSON-compatible values stored in the header (phase, step, seed, ...).

    Returns:
        The path of the written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    blobs = []
    offset = 0
    for name in params:
        data = np.ascontiguousarray(params[name], dtype=_DATA_TYPE).tobytes()
        directory.append(
            {"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "config": dataclass_to_table(params.config),
            "dtype": _DATA_TYPE,
            "tensors": directory,
            "metadata": dict(metadata or {}),
        },
        indent=2,
    ).encode("utf-8")
    with path.open("wb") as file:
        file.write(CHECKPOINT_MAGIC)
        file.write(f"{len(header)}\n".encode("ascii"))
        file.write(header)
        for blob in blobs:
            file.write(blob)
    _logger.debug("saved %d tensors (%d bytes) to %s", len(directory), offset, path)
    return path


def read_checkpoint_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Return the parsed JSON header of a checkpoint file.

    Raises:
        CheckpointFormatError: The file does not start with a checkpoint header.
    """
    with Path(path).open("rb") as file:
        header, _ = _read_header(file.read(), path)
    return header


def _read_header(raw: bytes, path: Union[str, Path]) -> Tuple[Dict[str, Any], int]:
    if not raw.startswith(CHECKPOINT_MAGIC):
        msg = f"{path} is not a checkpoint file"
        raise CheckpointFormatError(msg)
    cursor = len(CHECKPOINT_MAGIC)
    newline = raw.find(b"\n", cursor)
    try:
        size = int(raw[cursor:newline].decode("ascii"))
        start = newline + 1
        header = json.loads(raw[start : start + size].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as error:
        msg = f"{path}: unreadable checkpoint header ({error})"
        raise CheckpointFormatError(msg) from error
    return header, start + size


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file.

    Args:
        path: The file to read.

    Returns:
        The parameters (float32) and the stored metadata.

    Raises:
        CheckpointFormatError: The header is corrupt or does not match the stored data.
    """
    raw = Path(path).read_bytes()
    header, data_start = _read_header(raw, path)
    payload = memoryview(raw)[data_start:]
    try:
        config_table = dict(header["config"])
        config = ModelConfig(**config_table)
        directory = [
            (
                str(entry["name"]),
                tuple(int(n) for n in entry["shape"]),
                int(entry["offset"]),
                int(entry["nbytes"]),
            )
            for entry in header["tensors"]
        ]
    except (KeyError, TypeError, ValueError, ConfigError) as error:
        msg = f"{path}: invalid checkpoint header ({error!r})"
        raise CheckpointFormatError(msg) from error
    expected_bytes = sum(nbytes for *_, nbytes in directory)
    if expected_bytes != len(payload):
        msg = f"{path}: header describes {expected_bytes} data bytes, file holds {len(payload)}"
        raise CheckpointFormatError(msg)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape, start, nbytes in directory:
        if nbytes != int(np.prod(shape)) * 4:
            msg = f"{path}: tensor {name} of shape {shape} cannot hold {nbytes} bytes"
            raise CheckpointFormatError(msg)
        if start < 0 or start + nbytes > len(payload):
            msg = f"{path}: tensor {name} lies outside the data section"
            raise CheckpointFormatError(msg)
        array = np.frombuffer(payload[start : start + nbytes], dtype=_DATA_TYPE).reshape(shape)
        tensors[name] = array.astype(np.float32)
    try:
        params = ModelParams(config, tensors)
    except ConfigError as error:
        msg = f"{path}: {error}"
        raise CheckpointFormatError(msg) from error
    _logger.debug("loaded %d tensors from %s", len(tensors), path)
    return Checkpoint(params=params, metadata=dict(header.get("metadata", {})))
