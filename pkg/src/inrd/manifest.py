"""Run directory layout and provenance manifest."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .io import file_sha256, write_csv

SUBDIRS = ("checkpoints", "csv", "maps", "galleries", "images")


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)     # path -> sha256
    artifacts: list = field(default_factory=list)  # paths relative to the run dir
    version: str = __version__
    timings: dict = field(default_factory=dict)    # stage -> seconds

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))


class RunWriter:
    """Single writer for a run directory; every artifact goes through ``write``.

    Worker threads compute, the writer serializes file output and records
    each path in the manifest.
    """

    def __init__(self, root: Path, manifest: RunManifest):
        self.dir = Path(root) / manifest.run_id
        self.manifest = manifest
        self._lock = threading.Lock()
        self._clock: dict[str, float] = {}
        for sub in SUBDIRS:
            (self.dir / sub).mkdir(parents=True, exist_ok=True)

    def path(self, sub: str, name: str) -> Path:
        return self.dir / sub / name

    def write(self, sub: str, name: str, writer, *args) -> Path:
        """Call ``writer(*args, path)`` under the lock and register the result."""
        target = self.path(sub, name)
        with self._lock:
            writer(*args, target)
            rel = str(target.relative_to(self.dir))
            if rel not in self.manifest.artifacts:
                self.manifest.artifacts.append(rel)
        return target

    def table(self, name: str, rows, columns) -> Path:
        """CSV under ``csv/`` with a fixed column order."""
        return self.write("csv", name, lambda path: write_csv(path, rows, columns))

    def add_input(self, path: Path) -> None:
        self.manifest.inputs[str(path)] = file_sha256(path)

    def start(self, stage: str) -> None:
        self._clock[stage] = time.perf_counter()

    def stop(self, stage: str) -> None:
        self.manifest.timings[stage] = round(time.perf_counter() - self._clock.pop(stage), 3)

    def close(self) -> Path:
        out = self.dir / "manifest.json"
        out.write_text(self.manifest.to_json() + "\n")
        return out
