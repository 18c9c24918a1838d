"""Single-file checkpoint container.

Layout: magic ``TCKP``, uint16 version, uint64 header length, a canonical
JSON header (kind, config, meta, array directory), then raw little-endian
array blobs in directory order. Serialization is fully deterministic so
re-running a training with the same seed yields a byte-identical file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TCKP"
VERSION = 1


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    directory = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = _canonical_json({"kind": kind, "config": config, "meta": meta or {}, "arrays": directory})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<HQ", raw[4:14])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[14 : 14 + hlen])
    base = 14 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]), copy=True)
    return header["kind"], header["config"], arrays, header["meta"]


def content_hash(kind: str, config: dict, arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over kind, config and parameter bytes (meta excluded)."""
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(_canonical_json(config))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
