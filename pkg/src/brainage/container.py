"""Self-describing binary container for named float64 arrays.

Layout::

    b"BAGC"  magic
    u32      format version (little-endian)
    u64      header length in bytes
    header   UTF-8 JSON: kind, meta, and an array manifest
             (name, shape, byte offset, byte count)
    payload  concatenated little-endian float64 array data

The header is written with sorted keys so identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"BAGC"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class ContainerError(ValueError):
    """Raised when a container cannot be read or fails a manifest check."""


def to_bytes(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        raw = data.tobytes()
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "kind": kind,
        "dtype": "<f8",
        "meta": dict(meta or {}),
        "arrays": manifest,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(blob: bytes, expected_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ContainerError("not a BAGC container (bad magic or too short)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container format version {version}")
    if len(blob) < 16 + hlen:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from None
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise ContainerError(f"expected container kind {expected_kind!r}, found {header.get('kind')!r}")
    payload = blob[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise ContainerError(
            f"truncated container payload: expected {header['payload_bytes']} bytes, found {len(payload)}"
        )
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if entry["nbytes"] != count * _DTYPE.itemsize:
            raise ContainerError(f"array {entry['name']!r}: byte count does not match shape {shape}")
        start = entry["offset"]
        buf = payload[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=_DTYPE).reshape(shape).astype(np.float64)
    return arrays, header["meta"]


def write_container(path, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(to_bytes(kind, arrays, meta))


def read_container(path, expected_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return from_bytes(Path(path).read_bytes(), expected_kind)
