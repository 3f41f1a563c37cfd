"""Single-file checkpoint container for named parameter tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"DVCK"
    version 1 byte   currently 1
    u32     metadata length, then UTF-8 JSON metadata (flat str->str map)
    u32     entry count
    per entry (manifest):
        u16 name length + UTF-8 name
        u8  ndim, then ndim x u32 extents
        u64 payload byte length
    payloads, concatenated in manifest order, float32 little-endian

Values are stored at 32-bit precision; loading returns float64 arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DVCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for malformed, truncated or unsupported checkpoint files."""


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    metadata: Mapping[str, str] | None = None,
) -> None:
    path = Path(path)
    meta_bytes = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    names = list(tensors.keys())

    manifest = bytearray()
    payloads = []
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float32)
        payload = arr.astype("<f4").tobytes()
        encoded = name.encode("utf-8")
        manifest += struct.pack("<H", len(encoded)) + encoded
        manifest += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            manifest += struct.pack("<I", extent)
        manifest += struct.pack("<Q", len(payload))
        payloads.append(payload)

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(names)))
        fh.write(bytes(manifest))
        for payload in payloads:
            fh.write(payload)
    tmp.replace(path)


def _read(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return blob


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Return (name -> float64 array, metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<B", _read(fh, 1, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read(fh, 4, "metadata length"))
        metadata = json.loads(_read(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4, "entry count"))

        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read(fh, 4, "extent"))[0] for _ in range(ndim)
            )
            (nbytes,) = struct.unpack("<Q", _read(fh, 8, "payload length"))
            entries.append((name, shape, nbytes))

        tensors: dict[str, np.ndarray] = {}
        for name, shape, nbytes in entries:
            payload = _read(fh, nbytes, f"payload of '{name}'")
            arr = np.frombuffer(payload, dtype="<f4")
            expected = int(np.prod(shape)) if shape else 1
            if arr.size != expected:
                raise CheckpointError(
                    f"payload of '{name}' has {arr.size} values, shape {shape} needs {expected}"
                )
            tensors[name] = arr.reshape(shape).astype(np.float64)
    return tensors, metadata


def manifest_names(path: str | Path) -> list[str]:
    """Names stored in a checkpoint, without loading payloads into floats."""
    tensors, _ = load_checkpoint(path)
    return sorted(tensors.keys())
