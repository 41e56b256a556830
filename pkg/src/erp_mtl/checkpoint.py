"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"ERPMTLCK"
    offset 8   u32       container version (currently 1)
    offset 12  u64       header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted
    offset 20+H          tensor payload

The header holds ``meta`` (free-form config: encoder/decoder configs,
vocabulary, seeds) and ``tensors``, a list of ``{name, dtype, shape,
offset, nbytes}`` entries in name order. ``offset`` is relative to the
start of the payload and ``dtype`` is always a little-endian numpy code
(``<f4`` or ``<f8``). Identical contents always serialize to identical
bytes, so file hashes are stable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"ERPMTLCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.kind != "f":
            raise CheckpointError(f"{name}: only float tensors are stored, got {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": "erp-mtl-checkpoint", "version": VERSION, "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return tensors, header["meta"]


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    blob = dumps(tensors, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
