"""Radar reflectivity data model, preprocessing and augmentation.

Fields live on plain 2-D float32 grids in dBZ. Preprocessing clips to the
[0, 60] dBZ working range and rounds to 0.1 dBZ (601 representable levels);
rain-rate conversion uses the Marshall-Palmer Z-R power law Z = a * R^b
with a = 200, b = 1.6.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

GOLDEN_64 = 0x9E3779B97F4A7C15  # additive constant for derived seeds


class PreprocessError(ValueError):
    """Raised when a field violates a preprocessing precondition."""


class NonFiniteValuesError(PreprocessError):
    """Input contains NaN or infinities; ``count`` pixels are offending."""

    def __init__(self, count: int):
        self.count = int(count)
        super().__init__(f"input contains {self.count} non-finite pixel(s)")


@dataclass(frozen=True)
class PreprocessSpec:
    """Clipping, quantization and Z-R parameters of the working range."""

    clip_min_dbz: float = 0.0
    clip_max_dbz: float = 60.0
    quantum_dbz: float = 0.1
    zr_a: float = 200.0
    zr_b: float = 1.6

    def __post_init__(self):
        if not self.clip_min_dbz < self.clip_max_dbz:
            raise ValueError("clip_min_dbz must be below clip_max_dbz")
        if self.quantum_dbz <= 0:
            raise ValueError("quantum_dbz must be positive")
        if self.zr_a <= 0 or self.zr_b <= 0:
            raise ValueError("Z-R coefficients must be positive")

    @property
    def n_levels(self) -> int:
        """Number of representable values after clip + quantize (601 default)."""
        return int(round((self.clip_max_dbz - self.clip_min_dbz) / self.quantum_dbz)) + 1


@dataclass(frozen=True, eq=False)
class ReflectivityField:
    """A 2-D reflectivity map in dBZ at a nominal 1 km/pixel resolution."""

    values: np.ndarray
    resolution_km: float = 1.0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"expected a 2-D grid, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class RainRateField:
    """A 2-D rain-rate map in mm/h, same grid as its source reflectivity."""

    values: np.ndarray
    resolution_km: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(eq=False)
class RadarSequence:
    """A time-ordered stack of reflectivity frames at a fixed timestep.

    ``values`` has shape (T, H, W), oldest frame first. ``start_time`` is
    None for synthetic data and is not persisted by the file format.
    """

    values: np.ndarray
    timestep_minutes: int = 5
    resolution_km: float = 1.0
    start_time: str | None = None

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"expected (T, H, W), got shape {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def frame(self, i: int) -> ReflectivityField:
        return ReflectivityField(self.values[i], self.resolution_km)

    def frames(self) -> Iterator[ReflectivityField]:
        for i in range(len(self)):
            yield self.frame(i)


def _quantize_array(values: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Clip then round-half-away-from-zero at the quantum.

    Clipping runs first, so rounding only ever sees non-negative values and
    half-away-from-zero reduces to floor(v/q + 0.5). Results are exact
    multiples of the quantum up to float32 representation.
    """
    v = np.asarray(values, dtype=np.float64)
    v = np.clip(v, spec.clip_min_dbz, spec.clip_max_dbz)
    q = spec.quantum_dbz
    return (np.floor(v / q + 0.5) * q).astype(np.float32)


def clip_and_quantize(fld: ReflectivityField, spec: PreprocessSpec = PreprocessSpec()) -> ReflectivityField:
    """Map a raw reflectivity field onto the 601-level working range.

    Raises :class:`NonFiniteValuesError` (with the offending pixel count) on
    NaN/inf input. Idempotent and monotone.
    """
    bad = ~np.isfinite(fld.values)
    if bad.any():
        raise NonFiniteValuesError(bad.sum())
    return ReflectivityField(_quantize_array(fld.values, spec), fld.resolution_km)


def preprocess_sequence(seq: RadarSequence, spec: PreprocessSpec = PreprocessSpec()) -> RadarSequence:
    """Apply :func:`clip_and_quantize` to every frame of a sequence."""
    bad = ~np.isfinite(seq.values)
    if bad.any():
        raise NonFiniteValuesError(bad.sum())
    return RadarSequence(
        _quantize_array(seq.values, spec),
        seq.timestep_minutes,
        seq.resolution_km,
        seq.start_time,
    )


def dbz_to_rainrate(fld: ReflectivityField, spec: PreprocessSpec = PreprocessSpec()) -> RainRateField:
    """Marshall-Palmer conversion, R = (10^(dBZ/10) / a)^(1/b) in mm/h."""
    z = np.power(10.0, np.asarray(fld.values, dtype=np.float64) / 10.0)
    r = np.power(z / spec.zr_a, 1.0 / spec.zr_b)
    return RainRateField(r, fld.resolution_km)


def rainrate_to_dbz(fld: RainRateField, spec: PreprocessSpec = PreprocessSpec()) -> ReflectivityField:
    """Inverse Marshall-Palmer, dBZ = 10*log10(a * R^b).

    R = 0 maps to the 0 dBZ clip floor rather than -inf. Output is raw
    (not clipped or quantized); run :func:`clip_and_quantize` before
    storing. Negative rain rates are rejected.
    """
    r = np.asarray(fld.values, dtype=np.float64)
    if (r < 0).any():
        raise PreprocessError("rain rates must be non-negative")
    dbz = np.zeros_like(r)
    wet = r > 0
    dbz[wet] = 10.0 * np.log10(spec.zr_a * np.power(r[wet], spec.zr_b))
    return ReflectivityField(dbz, fld.resolution_km)


def apply_transform(
    seq: RadarSequence,
    offset: tuple[int, int],
    crop_hw: tuple[int, int],
    rot_k: int,
    flip: bool,
) -> RadarSequence:
    """Crop at ``offset``, rotate by ``rot_k`` * 90 degrees, optionally flip.

    The same transform is applied to every frame so the motion in the
    sequence stays coherent.
    """
    t, h, w = seq.values.shape
    ch, cw = crop_hw
    oy, ox = offset
    if ch > h or cw > w:
        raise ValueError(f"crop {crop_hw} larger than frame {(h, w)}")
    if not (0 <= oy <= h - ch and 0 <= ox <= w - cw):
        raise ValueError(f"offset {offset} out of range for crop {crop_hw} in frame {(h, w)}")
    out = seq.values[:, oy : oy + ch, ox : ox + cw]
    if rot_k % 4:
        out = np.rot90(out, k=rot_k % 4, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return RadarSequence(
        np.ascontiguousarray(out),
        seq.timestep_minutes,
        seq.resolution_km,
        seq.start_time,
    )


def augment(seq: RadarSequence, crop_hw: tuple[int, int], rng_seed: int) -> RadarSequence:
    """Seeded random crop + 90-degree rotation + horizontal flip.

    One transform is drawn (offset_y, offset_x, rotation k, flip) and shared
    by all frames; a fixed seed makes the result a pure function of the
    inputs.
    """
    t, h, w = seq.values.shape
    ch, cw = crop_hw
    if ch > h or cw > w:
        raise ValueError(f"crop {crop_hw} larger than frame {(h, w)}")
    rng = np.random.default_rng(rng_seed)
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    rot_k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    return apply_transform(seq, (oy, ox), crop_hw, rot_k, flip)


def derive_seed(seed: int, index: int) -> int:
    """Stable per-index seed: seed + index * golden-ratio constant mod 2^64.

    Satisfies derive(derive(s, i), 0) == derive(s, i), so ensemble member i
    of a run is reproducible as member 0 of a run seeded with the derived
    value.
    """
    return (int(seed) + int(index) * GOLDEN_64) % (1 << 64)


def check_field_invariants(values: np.ndarray, spec: PreprocessSpec = PreprocessSpec()) -> None:
    """Raise if an array violates the preprocessed-field invariants."""
    if not np.isfinite(values).all():
        raise PreprocessError("non-finite values present")
    if values.min() < spec.clip_min_dbz or values.max() > spec.clip_max_dbz:
        raise PreprocessError("values outside the clipped dynamic range")
    scaled = np.asarray(values, dtype=np.float64) / spec.quantum_dbz
    if not np.allclose(scaled, np.round(scaled), atol=1e-3):
        raise PreprocessError("values are not aligned to the quantum")
