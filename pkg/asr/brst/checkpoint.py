"""BRST1 checkpoint container.

Layout::

    b"BRST1" | u32 little-endian header length | JSON header | raw arrays

The header carries free-form ``metadata`` and a ``tensors`` manifest listing
name, shape, dtype, byte offset (relative to the end of the header) and byte
count for every array. Arrays are stored little-endian, row-major, in
manifest order. The JSON is written with sorted keys and no timestamps so a
given state always produces the same bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .model import ModelParams, Vocabulary, param_shapes
from .tensor import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"BRST1"
_LENGTH = struct.Struct("<I")


def write_container(path: Path, tensors: dict[str, np.ndarray], metadata: dict[str, Any]) -> None:
    manifest: list[dict[str, Any]] = []
    blobs: list[bytes] = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array)
        little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
        blob = little.tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": little.dtype.str,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata, "tensors": manifest}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(_LENGTH.pack(len(header)))
        handle.write(header)
        for blob in blobs:
            handle.write(blob)


def read_container(path: Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", component="file") from exc
    prefix = len(MAGIC) + _LENGTH.size
    if len(raw) < prefix or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a BRST1 checkpoint", component="header")
    (header_len,) = _LENGTH.unpack_from(raw, len(MAGIC))
    if len(raw) < prefix + header_len:
        raise CheckpointError(f"{path}: header is truncated", component="header")
    try:
        header = json.loads(raw[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON", component="header") from exc

    data = memoryview(raw)[prefix + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if start + nbytes > len(data):
            raise CheckpointError(
                f"{path}: tensor {name} needs bytes {start}..{start + nbytes} but only {len(data)} are present",
                component=name,
            )
        shape = tuple(entry["shape"])
        array = np.frombuffer(data[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        if array.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name} has the wrong byte count", component=name)
        tensors[name] = array.reshape(shape).astype(array.dtype.newbyteorder("="))
    return header.get("metadata", {}), tensors


@dataclass
class LoadedCheckpoint:
    params: ModelParams
    step: int
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Path, params: ModelParams, step: int = 0, extra: dict[str, Any] | None = None
) -> None:
    metadata = {
        "config": params.config.model_dump(),
        "vocab": list(params.vocab.tokens),
        "step": step,
        **(extra or {}),
    }
    write_container(path, params.state_dict(), metadata)
    logger.debug("Saved checkpoint %s (step %d)", path, step)


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    """Rebuild ModelParams from a checkpoint, validating it against its own config."""

    metadata, tensors = read_container(path)
    try:
        config = ModelConfig.model_validate(metadata["config"])
        vocab = Vocabulary(tuple(metadata["vocab"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: metadata lacks {exc}", component="metadata") from exc
    except (ValidationError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model metadata: {exc}", component="metadata") from exc

    store = ParamStore()
    for name, shape in param_shapes(config).items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}", component=name)
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}",
                component=name,
            )
        store.add(name, tensors[name], np.dtype(config.dtype))
    extra = {k: v for k, v in metadata.items() if k not in ("config", "vocab", "step")}
    return LoadedCheckpoint(
        params=ModelParams(config, vocab, store),
        step=int(metadata.get("step", 0)),
        metadata=extra,
    )


def checkpoint_manifest(path: Path) -> list[dict[str, Any]]:
    """The tensor manifest of a checkpoint, without loading its arrays."""

    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a BRST1 checkpoint", component="header")
    (header_len,) = _LENGTH.unpack_from(raw, len(MAGIC))
    start = len(MAGIC) + _LENGTH.size
    return json.loads(raw[start : start + header_len].decode("utf-8"))["tensors"]


__all__ = [
    "MAGIC",
    "LoadedCheckpoint",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_manifest",
]
