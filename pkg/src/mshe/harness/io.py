"""Output files of a run: JSON, CSV and raw dumps tagged with the run id, plus the manifest."""
from __future__ import annotations

import csv
import json
import os
import shutil
import subprocess
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .. import __version__

MANIFEST = "manifest.json"


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (set, tuple)):
        return list(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dumps(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=1, default=_jsonable)


def code_fingerprint() -> str:
    """Package version plus the git commit when available."""
    root = Path(__file__).resolve().parents[3]
    try:
        rev = subprocess.run(["git", "-C", str(root), "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class OutputSink:
    """Writes files inside one directory and remembers them for the manifest.

    Every JSON payload carries ``run_id``; every CSV starts with a
    ``# run_id=...`` line; raw dumps carry the run id in their file name.
    """

    def __init__(self, out_dir: str | Path, run_id: str, stamp: str | None = None):
        self.root = Path(out_dir).resolve()
        self.run_id = run_id
        self.stamp = stamp
        self.files: list[str] = []
        self._created_root = not self.root.exists()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root not in p.parents:
            raise ValueError(f"output {name!r} escapes the output directory")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _register(self, p: Path):
        rel = str(p.relative_to(self.root))
        if rel not in self.files:
            self.files.append(rel)

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        body = dict(payload)
        body["run_id"] = self.run_id
        if self.stamp:
            body["regime"] = self.stamp
        p.write_text(dumps(body))
        self._register(p)
        return p

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        p = self.path(name)
        with p.open("w", newline="") as fh:
            fh.write(f"# run_id={self.run_id}\n")
            if self.stamp:
                fh.write(f"# regime={self.stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        self._register(p)
        return p

    def raw_name(self, stem: str) -> str:
        return f"{stem}.{self.run_id}.bin"

    def write_raw(self, stem: str, array: np.ndarray) -> Path:
        p = self.path(self.raw_name(stem))
        arr = np.ascontiguousarray(array)
        arr.astype(arr.dtype.newbyteorder("<")).tofile(p)
        self._register(p)
        return p

    def adopt(self, p: Path):
        """Register a file written by other code inside the directory."""
        self._register(Path(p).resolve())

    def cleanup(self):
        """Remove everything written so far (used when a run fails)."""
        for rel in self.files:
            try:
                (self.root / rel).unlink()
            except FileNotFoundError:
                pass
        self.files.clear()
        tmp = self.root / (MANIFEST + ".tmp")
        if tmp.exists():
            tmp.unlink()
        if self._created_root and self.root.exists() and not any(self.root.iterdir()):
            shutil.rmtree(self.root, ignore_errors=True)

    def write_manifest(self, config_echo: dict, wall_clock: float, anomalies: dict) -> Path:
        missing = [f for f in self.files if not (self.root / f).exists()]
        if missing:
            raise RuntimeError(f"listed outputs missing: {missing}")
        manifest = {
            "run_id": self.run_id,
            "config": config_echo,
            "code_version": code_fingerprint(),
            "wall_clock_seconds": wall_clock,
            "outputs": sorted(self.files),
            "anomalies": anomalies,
        }
        if self.stamp:
            manifest["regime"] = self.stamp
        tmp = self.root / (MANIFEST + ".tmp")
        tmp.write_text(dumps(manifest))
        final = self.root / MANIFEST
        os.replace(tmp, final)
        return final


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v
