"""Seeded generator of radar-like precipitation sequences.

Each sequence is a handful of anisotropic Gaussian cells that advect with a
constant per-cell velocity and grow or decay multiplicatively, composited
with a pixelwise max and a small clipped background noise. Everything is a
pure function of the seed, so datasets regenerate bit-identically (within
one kernel backend).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tokencast import kernels
from tokencast.grid import PreprocessSpec, RadarSequence, _quantize_array
from tokencast.rprc import read_sequence, write_sequence


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic precipitation model.

    Ranges are inclusive (low, high) pairs sampled uniformly per sequence
    or per cell; ``n_cells`` is an integer range.
    """

    grid_hw: tuple[int, int] = (64, 64)
    n_frames: int = 12
    n_cells: tuple[int, int] = (1, 4)
    cell_sigma_px: tuple[float, float] = (2.5, 7.0)
    peak_dbz: tuple[float, float] = (20.0, 58.0)
    advection_px_per_step: tuple[float, float] = (-3.0, 3.0)
    growth_rate_per_step: tuple[float, float] = (0.94, 1.05)
    background_noise_dbz: float = 0.8
    timestep_minutes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")
        if self.n_cells[0] > self.n_cells[1] or self.n_cells[0] < 0:
            raise ValueError("n_cells range is empty or negative")
        for name in ("cell_sigma_px", "peak_dbz", "advection_px_per_step", "growth_rate_per_step"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty")
        if not (0.0 <= self.peak_dbz[0] and self.peak_dbz[1] <= 60.0):
            raise ValueError("peak_dbz must sit inside [0, 60]")
        if self.grid_hw[0] < 8 or self.grid_hw[1] < 8:
            raise ValueError("grid too small")


def _draw(rng: np.random.Generator, lohi: tuple[float, float]) -> float:
    return float(rng.uniform(lohi[0], lohi[1]))


def generate_sequence(spec: SynthSpec, preprocess: PreprocessSpec = PreprocessSpec()) -> RadarSequence:
    """Render one preprocessed sequence from the spec's seed."""
    h, w = spec.grid_hw
    rng = np.random.default_rng(spec.seed)
    n_cells = int(rng.integers(spec.n_cells[0], spec.n_cells[1] + 1))

    # per-cell static parameters, drawn in a fixed order
    cells = []
    for _ in range(n_cells):
        cy = rng.uniform(0, h - 1)
        cx = rng.uniform(0, w - 1)
        sig_major = _draw(rng, spec.cell_sigma_px)
        sig_minor = _draw(rng, spec.cell_sigma_px)
        theta = rng.uniform(0, math.pi)
        peak = _draw(rng, spec.peak_dbz)
        vy = _draw(rng, spec.advection_px_per_step)
        vx = _draw(rng, spec.advection_px_per_step)
        growth = _draw(rng, spec.growth_rate_per_step)
        cells.append((cy, cx, sig_major, sig_minor, theta, peak, vy, vx, growth))

    noise_sigma = spec.background_noise_dbz / 2.0
    frames = np.empty((spec.n_frames, h, w), dtype=np.float64)
    for t in range(spec.n_frames):
        rows = np.empty((n_cells, 6), dtype=np.float64)
        for i, (cy, cx, smaj, smin, theta, peak, vy, vx, growth) in enumerate(cells):
            ct, st = math.cos(theta), math.sin(theta)
            # inverse covariance of the rotated anisotropic Gaussian
            a = ct * ct / smaj**2 + st * st / smin**2
            b = st * ct * (1.0 / smaj**2 - 1.0 / smin**2)
            c = st * st / smaj**2 + ct * ct / smin**2
            rows[i] = (cy + vy * t, cx + vx * t, a, b, c, peak * growth**t)
        frame = kernels.render_cells(h, w, rows)
        if noise_sigma > 0:
            frame = frame + np.maximum(rng.normal(0.0, noise_sigma, size=(h, w)), 0.0)
        frames[t] = frame

    return RadarSequence(
        _quantize_array(frames, preprocess),
        timestep_minutes=spec.timestep_minutes,
    )


def split_of_seed(seed: int, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> str:
    """Deterministic train/val/test assignment from the sequence seed.

    Assignment thresholds the seed residue modulo the smallest denominator
    that represents the fractions exactly, so a block of consecutive seeds
    splits in exactly the requested proportions and regenerating a dataset
    with more sequences never reassigns existing ones.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    denom = None
    for d in (10, 20, 50, 100, 1000):
        if all(abs(f * d - round(f * d)) < 1e-9 for f in fractions):
            denom = d
            break
    if denom is None:
        raise ValueError("split fractions need a denominator of at most 1000")
    r = int(seed) % denom
    train_hi = round(fractions[0] * denom)
    val_hi = train_hi + round(fractions[1] * denom)
    if r < train_hi:
        return "train"
    if r < val_hi:
        return "val"
    return "test"


@dataclass
class DatasetManifest:
    """Filenames, seeds and split assignment of a generated dataset."""

    root: Path
    records: list[tuple[str, int, str]] = field(default_factory=list)

    def filenames(self, split: str | None = None) -> list[Path]:
        return [self.root / name for name, _, s in self.records if split is None or s == split]

    def counts(self) -> dict[str, int]:
        out = {"train": 0, "val": 0, "test": 0}
        for _, _, s in self.records:
            out[s] += 1
        return out

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.txt"
        lines = [f"{name} {seed} {split}" for name, seed, split in self.records]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            name, seed, split = line.split()
            records.append((name, int(seed), split))
        return cls(root=path.parent, records=records)

    def load_split(self, split: str) -> list[RadarSequence]:
        return [read_sequence(p) for p in self.filenames(split)]


def generate_dataset(
    spec: SynthSpec,
    n_sequences: int,
    out_dir: str | Path,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    preprocess: PreprocessSpec = PreprocessSpec(),
) -> DatasetManifest:
    """Generate ``n_sequences`` RPRC files with consecutive seeds.

    Sequence i uses seed ``spec.seed + i``; the manifest records filename,
    seed and split for each.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=out_dir)
    for i in range(n_sequences):
        seed = spec.seed + i
        seq_spec = replace(spec, seed=seed)
        seq = generate_sequence(seq_spec, preprocess)
        name = f"seq_{seed:08d}.rprc"
        write_sequence(seq, out_dir / name)
        manifest.records.append((name, seed, split_of_seed(seed, fractions)))
    manifest.save()
    return manifest
