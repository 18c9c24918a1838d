"""Run manifests: one JSON record per CLI invocation.

A manifest captures everything needed to reproduce a run: the subcommand,
the fully resolved configuration, SHA-256 hashes of the inputs, the seed
and the output paths. Manifests are append-only; an existing file is never
overwritten, a numbered sibling is written instead.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from tokencast import __version__
from tokencast.checkpoint import file_hash


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None = None
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_clock_s: float | None = None
    extra: dict = field(default_factory=dict)
    artifact_version: str = __version__
    created_unix: float = field(default_factory=time.time)

    def add_input(self, label: str, path: str | Path) -> None:
        self.input_hashes[label] = file_hash(path)

    def write(self, out_dir: str | Path, name: str = "run_manifest.json") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        serial = 1
        while path.exists():
            serial += 1
            path = out_dir / f"{Path(name).stem}.{serial}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data)
