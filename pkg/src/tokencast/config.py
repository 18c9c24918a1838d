"""YAML configuration for the pipeline.

One file holds optional sections ``preprocess``, ``synth``, ``split``,
``tokenizer``, ``tokenizer_schedule``, ``forecaster`` and
``forecaster_schedule``; missing sections and keys fall back to the
package defaults. CLI flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from tokencast.forecaster import ForecasterConfig, ForecasterSchedule
from tokencast.grid import PreprocessSpec
from tokencast.synthetic import SynthSpec
from tokencast.tokenizer import TokenizerConfig, TrainSchedule


class ConfigError(ValueError):
    """Malformed configuration file or invalid values."""


@dataclass
class PipelineConfig:
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    synth: SynthSpec = field(default_factory=SynthSpec)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    tokenizer_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    forecaster_schedule: ForecasterSchedule = field(default_factory=ForecasterSchedule)

    def snapshot(self) -> dict:
        """Fully resolved configuration as plain data (for run manifests)."""
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else list(value)
        return out


_SECTIONS = {
    "preprocess": PreprocessSpec,
    "synth": SynthSpec,
    "tokenizer": TokenizerConfig,
    "tokenizer_schedule": TrainSchedule,
    "forecaster": ForecasterConfig,
    "forecaster_schedule": ForecasterSchedule,
}

_TUPLE_FIELDS = {
    "grid_hw",
    "n_cells",
    "cell_sigma_px",
    "peak_dbz",
    "advection_px_per_step",
    "growth_rate_per_step",
}


def _build_section(cls, data: dict, section: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{section}'")
    coerced = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{section}': {exc}") from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML config file; ``None`` returns pure defaults."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(_SECTIONS) - {"split"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    for section, cls in _SECTIONS.items():
        if section in data:
            if not isinstance(data[section], dict):
                raise ConfigError(f"{path}: section '{section}' must be a mapping")
            setattr(cfg, section, _build_section(cls, data[section], section))
    if "split" in data:
        fr = data["split"].get("fractions", list(cfg.split_fractions))
        if len(fr) != 3:
            raise ConfigError("split.fractions needs exactly three values")
        cfg.split_fractions = tuple(float(x) for x in fr)
    return cfg


def save_config(cfg: PipelineConfig, path: str | Path) -> Path:
    path = Path(path)
    data = cfg.snapshot()
    data["split"] = {"fractions": data.pop("split_fractions")}
    path.write_text(yaml.safe_dump(data, sort_keys=True))
    return path
