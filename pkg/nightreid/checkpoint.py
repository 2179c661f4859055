"""Named-tensor archive used for checkpoints.

Layout::

    magic (8 bytes) | header length (u32 LE) | header CRC32 (u32 LE)
    | header (UTF-8 JSON) | payloads

The header holds ``format_version`` and an ``entries`` list of
``{name, shape, offset, nbytes, crc}``; every payload is raw little-endian
float32. Any other header keys are opaque to this module.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import os
from pathlib import Path
import struct
import tempfile
from typing import Any, Callable, Mapping
import zlib

import numpy as np
import torch

from .const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from .errors import CheckpointIntegrityError, IncompatibleCheckpointError

_LOGGER = logging.getLogger(__name__)

_PREFIX = struct.Struct("<II")


@dataclass
class Archive:
    """Decoded archive contents."""

    header: dict[str, Any]
    tensors: dict[str, torch.Tensor]


def _encode(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def write_archive(path: str | Path, header: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> None:
    """Write ``tensors`` with ``header`` atomically (temp file, then rename)."""
    path = Path(path)
    entries = []
    payloads = []
    offset = 0
    for name, tensor in tensors.items():
        payload = _encode(tensor)
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(payload),
                "crc": zlib.crc32(payload),
            }
        )
        payloads.append(payload)
        offset += len(payload)
    doc = {**header, "format_version": CHECKPOINT_FORMAT_VERSION, "entries": entries}
    header_bytes = json.dumps(doc, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(CHECKPOINT_MAGIC)
            handle.write(_PREFIX.pack(len(header_bytes), zlib.crc32(header_bytes)))
            handle.write(header_bytes)
            for payload in payloads:
                handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    _LOGGER.debug("Wrote %d tensors to %s", len(entries), path)


def _read_header(data: bytes, path: Path) -> tuple[dict[str, Any], int]:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointIntegrityError(f"{path} is not a nightreid archive")
    start = len(CHECKPOINT_MAGIC)
    if len(data) < start + _PREFIX.size:
        raise CheckpointIntegrityError(f"{path} is truncated")
    length, crc = _PREFIX.unpack_from(data, start)
    start += _PREFIX.size
    header_bytes = data[start : start + length]
    if len(header_bytes) != length or zlib.crc32(header_bytes) != crc:
        raise CheckpointIntegrityError(f"{path} has a corrupt header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointIntegrityError(f"{path} has an unreadable header") from err
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return header, start + length


def read_archive(path: str | Path, select: Callable[[str], bool] | None = None) -> Archive:
    """Read and verify an archive, keeping only entries accepted by ``select``.

    Raises:
        OSError: If the file cannot be read
        IncompatibleCheckpointError: On a format version mismatch
        CheckpointIntegrityError: On truncation or a checksum failure
    """
    path = Path(path)
    data = path.read_bytes()
    header, base = _read_header(data, path)
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["entries"]:
        start = base + entry["offset"]
        payload = data[start : start + entry["nbytes"]]
        if len(payload) != entry["nbytes"]:
            _LOGGER.error("Archive %s is truncated at %s", path, entry["name"])
            raise CheckpointIntegrityError(f"{path} is truncated at {entry['name']}")
        if zlib.crc32(payload) != entry["crc"]:
            _LOGGER.error("Checksum mismatch for %s in %s", entry["name"], path)
            raise CheckpointIntegrityError(f"{path}: checksum mismatch for {entry['name']}")
        if select is not None and not select(entry["name"]):
            continue
        array = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array)
    return Archive(header=header, tensors=tensors)


def is_archive(path: str | Path) -> bool:
    """Return True if ``path`` starts with the archive magic."""
    with open(path, "rb") as handle:
        return handle.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC


def load_state_file(path: str | Path) -> dict[str, torch.Tensor]:
    """Load named tensors from an archive or a ``torch.save`` state dict."""
    if is_archive(path):
        return {
            name: tensor
            for name, tensor in read_archive(path).tensors.items()
            if not name.startswith("optimizer/")
        }
    state = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("model", "state_dict"):
        if isinstance(state, dict) and isinstance(state.get(key), dict):
            state = state[key]
    if not isinstance(state, dict):
        raise CheckpointIntegrityError(f"{path} does not contain a state dict")
    return {name: value for name, value in state.items() if isinstance(value, torch.Tensor)}
