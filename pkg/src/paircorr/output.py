"""Plain-text writers for sweep tables and the run manifest.

CSV files have ``#`` comment lines (column units and definitions, the config
digest, the manifest name), then one header line, then data. Floats are
written with ``repr`` so the output is locale-free and reproducible bit for
bit. Timestamps live only in the manifest, which keeps reruns of the same
configuration byte-identical at the CSV level.
"""
from __future__ import annotations

import csv
import io
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

MANIFEST_NAME = "manifest.txt"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Column:
    name: str
    unit: str = "1"
    meaning: str = ""


@dataclass
class RunManifest:
    """Flat key=value record of one CLI invocation and the files it wrote."""

    config_hash: str
    seed: Optional[int]
    command: str
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    finished: str = ""
    files: list = field(default_factory=list)

    def versions(self) -> dict:
        import pydantic
        import scipy
        import yaml

        from . import __version__

        return {
            "paircorr": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pydantic": pydantic.__version__,
            "pyyaml": yaml.__version__,
        }

    def write(self, out_dir: Path) -> Path:
        self.finished = datetime.now(timezone.utc).isoformat(timespec="seconds")
        lines = [
            f"config_hash={self.config_hash}",
            f"seed={'' if self.seed is None else self.seed}",
            f"command={self.command}",
            f"started={self.started}",
            f"finished={self.finished}",
        ]
        lines += [f"version.{k}={v}" for k, v in self.versions().items()]
        lines.append(f"n_files={len(self.files)}")
        lines += [f"file.{k}={name}" for k, name in enumerate(self.files)]
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text("\n".join(lines) + "\n")
        return path


class OutputDir:
    """Directory of CSV outputs sharing one manifest."""

    def __init__(self, path, manifest: RunManifest):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def _preamble(self, title: str, notes: Sequence[str]) -> list:
        lines = [f"# {title}", f"# manifest: {MANIFEST_NAME}", f"# config_hash: {self.manifest.config_hash}"]
        lines += [f"# {n}" for n in notes]
        return lines

    def table(self, name: str, columns: Sequence[Column], rows: Iterable[Mapping], title: str,
              notes: Sequence[str] = ()) -> Path:
        """Write rows of dicts keyed by column name."""
        buf = io.StringIO()
        for line in self._preamble(title, notes):
            buf.write(line + "\n")
        for c in columns:
            buf.write(f"# column {c.name} [{c.unit}]: {c.meaning}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([c.name for c in columns])
        for r in rows:
            w.writerow([_fmt(r[c.name]) for c in columns])
        return self._commit(name, buf.getvalue())

    def matrix(self, name: str, m: np.ndarray, title: str, unit: str, meaning: str,
               notes: Sequence[str] = ()) -> Path:
        """Write a 2-D array with the row index in the first column."""
        m = np.asarray(m)
        buf = io.StringIO()
        for line in self._preamble(title, notes):
            buf.write(line + "\n")
        buf.write(f"# column i [index]: pixel index on the first array (row)\n")
        buf.write(f"# column j<k> [{unit}]: {meaning} for column pixel k\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i"] + [f"j{k}" for k in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([i] + [_fmt(v) for v in row])
        return self._commit(name, buf.getvalue())

    def binary(self, name: str) -> Path:
        self.manifest.files.append(name)
        return self.path / name

    def _commit(self, name: str, text: str) -> Path:
        p = self.path / name
        p.write_text(text)
        self.manifest.files.append(name)
        return p

    def close(self) -> Path:
        return self.manifest.write(self.path)
