"""RPRC container: byte layout, round trips, error classes."""

import numpy as np
import pytest

from tokencast.grid import RadarSequence
from tokencast.rprc import (
    HEADER_SIZE,
    BadMagicError,
    TruncatedPayloadError,
    VersionMismatchError,
    read_sequence,
    write_sequence,
)


def test_header_plus_payload_arithmetic(tmp_path):
    seq = RadarSequence(np.zeros((1, 2, 2), dtype=np.float32))
    p = write_sequence(seq, tmp_path / "z.rprc")
    assert p.stat().st_size == 24 + 16


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    seq = RadarSequence(rng.uniform(0, 60, size=(5, 12, 16)).astype(np.float32), timestep_minutes=5)
    p = write_sequence(seq, tmp_path / "s.rprc")
    back = read_sequence(p)
    assert back.values.tobytes() == seq.values.tobytes()
    assert back.timestep_minutes == 5
    # writing the read sequence reproduces the file bytes
    p2 = write_sequence(back, tmp_path / "s2.rprc")
    assert p.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    seq = RadarSequence(np.zeros((1, 2, 2), dtype=np.float32))
    p = write_sequence(seq, tmp_path / "m.rprc")
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_sequence(p)


def test_version_mismatch(tmp_path):
    seq = RadarSequence(np.zeros((1, 2, 2), dtype=np.float32))
    p = write_sequence(seq, tmp_path / "v.rprc")
    raw = bytearray(p.read_bytes())
    raw[4:6] = (99).to_bytes(2, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_sequence(p)


def test_truncated_payload(tmp_path):
    seq = RadarSequence(np.zeros((2, 4, 4), dtype=np.float32))
    p = write_sequence(seq, tmp_path / "t.rprc")
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_sequence(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "h.rprc"
    p.write_bytes(b"RPRC\x01")
    with pytest.raises(TruncatedPayloadError):
        read_sequence(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_sequence(tmp_path / "nope.rprc")


def test_header_layout_fields(tmp_path):
    seq = RadarSequence(np.zeros((3, 5, 7), dtype=np.float32), timestep_minutes=10)
    p = write_sequence(seq, tmp_path / "l.rprc")
    raw = p.read_bytes()
    assert raw[:4] == b"RPRC"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[6:10], "little") == 3
    assert int.from_bytes(raw[10:14], "little") == 5
    assert int.from_bytes(raw[14:18], "little") == 7
    assert int.from_bytes(raw[18:20], "little") == 10
    assert raw[20:24] == b"\x00\x00\x00\x00"
    assert len(raw) == HEADER_SIZE + 4 * 3 * 5 * 7
