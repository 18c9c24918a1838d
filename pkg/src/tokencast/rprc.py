"""Bit-exact binary container for radar sequences (the "RPRC" format).

Layout (little-endian, 24-byte header):

====== ======= ===========================================
offset size    field
====== ======= ===========================================
0      4       magic bytes ``RPRC``
4      2       format version, uint16 (currently 1)
6      4       T, number of frames, uint32
10     4       H, frame height, uint32
14     4       W, frame width, uint32
18     2       timestep in minutes, uint16
20     4       reserved, zero
24     4*T*H*W IEEE-754 float32 payload, frame-major then
               row-major
====== ======= ===========================================

``read_sequence(write_sequence(s))`` is byte-exact on the float32 values;
``start_time`` is not persisted (synthetic sequences carry none).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from tokencast.grid import RadarSequence

MAGIC = b"RPRC"
VERSION = 1
HEADER_SIZE = 24
_HEADER_FMT = "<4sHIIIH4x"  # magic, version, T, H, W, timestep, 4 reserved bytes


class RprcError(IOError):
    """Base class for RPRC container errors."""


class BadMagicError(RprcError):
    """File does not start with the RPRC magic bytes."""


class VersionMismatchError(RprcError):
    """File declares an unsupported format version."""


class TruncatedPayloadError(RprcError):
    """File is shorter than its header promises."""


def write_sequence(seq: RadarSequence, path: str | Path) -> Path:
    """Serialize a sequence; returns the path written."""
    path = Path(path)
    t, h, w = seq.values.shape
    header = struct.pack(_HEADER_FMT, MAGIC, VERSION, t, h, w, int(seq.timestep_minutes))
    assert len(header) == HEADER_SIZE
    payload = np.ascontiguousarray(seq.values, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    return path


def read_sequence(path: str | Path) -> RadarSequence:
    """Deserialize a sequence written by :func:`write_sequence`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, t, h, w, timestep = struct.unpack(_HEADER_FMT, raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, supported {VERSION}")
    expected = HEADER_SIZE + 4 * t * h * w
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes, header promises {expected}")
    values = np.frombuffer(raw, dtype="<f4", count=t * h * w, offset=HEADER_SIZE)
    values = values.reshape(t, h, w).copy()
    return RadarSequence(values, timestep_minutes=timestep)
