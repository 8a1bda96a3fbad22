"""Unit tests for the checkpoint file format."""

import json

from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from paradiff import load_checkpoint, save_checkpoint
from paradiff.checkpoint import read_checkpoint_header
from paradiff.helpers.constants import CHECKPOINT_MAGIC
from paradiff.helpers.exceptions import CheckpointFormatError
from paradiff.model import AttentionMode, forward, ModelParams


def test_round_trip(tmp_path: Path, tiny_params: ModelParams) -> None:
    """Saved parameters load back bit for bit, metadata included."""
    path = save_checkpoint(tmp_path / "nested" / "model.ckpt", tiny_params, {"phase": "ar"})
    loaded = load_checkpoint(path)
    assert loaded.metadata == {"phase": "ar"}
    assert loaded.params.config == tiny_params.config
    assert loaded.params.fingerprint() == tiny_params.fingerprint()
    for name in tiny_params:
        np.testing.assert_array_equal(loaded.params[name], tiny_params[name])
    np.testing.assert_array_equal(
        forward(loaded.params, [2, 5, 6], AttentionMode.FULL),
        forward(tiny_params, [2, 5, 6], AttentionMode.FULL),
    )


def test_header_is_readable(tmp_path: Path, tiny_params: ModelParams) -> None:
    """The header lists the configuration and every tensor."""
    path = save_checkpoint(tmp_path / "model.ckpt", tiny_params)
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    header = read_checkpoint_header(path)
    assert header["config"]["d_model"] == tiny_params.config.d_model
    assert [entry["name"] for entry in header["tensors"]] == list(tiny_params)
    assert header["metadata"] == {}


def test_not_a_checkpoint(tmp_path: Path) -> None:
    """Foreign files are rejected."""
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"hello world\n")
    with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
        load_checkpoint(path)


def test_truncated_data(tmp_path: Path, tiny_params: ModelParams) -> None:
    """A file missing tensor bytes is rejected."""
    path = save_checkpoint(tmp_path / "model.ckpt", tiny_params)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointFormatError, match="data bytes"):
        load_checkpoint(path)


def test_corrupt_header(tmp_path: Path) -> None:
    """An unparsable header is rejected."""
    path = tmp_path / "model.ckpt"
    path.write_bytes(CHECKPOINT_MAGIC + b"12\n{not json at")
    with pytest.raises(CheckpointFormatError, match="unreadable"):
        read_checkpoint_header(path)


def _drop(key: str) -> Callable[[Dict[str, Any]], None]:
    return lambda entry: entry.pop(key)


def _set(key: str, value: Any) -> Callable[[Dict[str, Any]], None]:
    return lambda entry: entry.update({key: value})


@pytest.mark.parametrize(
    ("edit", "message"),
    [
        (_drop("nbytes"), "invalid checkpoint header"),
        (_drop("name"), "invalid checkpoint header"),
        (_set("shape", None), "invalid checkpoint header"),
        (_set("offset", "start"), "invalid checkpoint header"),
        (_set("offset", 10**6), "outside the data section"),
    ],
)
def test_malformed_tensor_entry(
    tmp_path: Path,
    tiny_params: ModelParams,
    edit: Callable[[Dict[str, Any]], None],
    message: str,
) -> None:
    """A broken entry of the tensor directory is a format error naming the file."""
    path = save_checkpoint(tmp_path / "model.ckpt", tiny_params)
    header = read_checkpoint_header(path)
    data = path.read_bytes()[-sum(entry["nbytes"] for entry in header["tensors"]) :]
    edit(header["tensors"][-1])
    encoded = json.dumps(header).encode("utf-8")
    path.write_bytes(CHECKPOINT_MAGIC + f"{len(encoded)}\n".encode("ascii") + encoded + data)
    with pytest.raises(CheckpointFormatError, match=message) as error:
        load_checkpoint(path)
    assert "model.ckpt" in str(error.value)
