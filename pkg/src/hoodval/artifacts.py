"""Content-hash manifest for pipeline stages.

Every stage verifies its input files against manifest.json in the output
directory before running and records its outputs (and newly seen inputs)
after.  A hash mismatch means some upstream file changed after its
consumer ran; the stage refuses to proceed and names the stage to rerun.
The manifest carries no timestamps so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .geomodel import HoodvalError

MANIFEST_NAME = "manifest.json"


class StaleArtifactError(HoodvalError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir, files: dict[str, dict] | None = None):
        self.out_dir = Path(out_dir)
        self.files = files or {}

    @classmethod
    def load(cls, out_dir) -> "Manifest":
        p = Path(out_dir) / MANIFEST_NAME
        if not p.is_file():
            return cls(out_dir)
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise HoodvalError(f"corrupt manifest {p}: {exc}") from exc
        return cls(out_dir, files=doc.get("files", {}))

    def save(self) -> None:
        doc = {"files": {k: self.files[k] for k in sorted(self.files)}}
        (self.out_dir / MANIFEST_NAME).write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def _key(self, path) -> str:
        return os.path.relpath(Path(path).resolve(), self.out_dir.resolve())

    def check_input(self, path, stage: str) -> None:
        """Verify one input file; record it on first sight."""
        p = Path(path)
        if not p.is_file():
            raise HoodvalError(f"stage '{stage}': missing input file {p}")
        key = self._key(p)
        digest = sha256_file(p)
        entry = self.files.get(key)
        if entry is None:
            self.files[key] = {"sha256": digest, "stage": stage}
            return
        if entry["sha256"] != digest:
            raise StaleArtifactError(
                f"stage '{stage}': input {key} changed since stage "
                f"'{entry['stage']}' used it; rerun '{entry['stage']}' first")

    def record_output(self, path, stage: str) -> None:
        p = Path(path)
        if not p.is_file():
            raise HoodvalError(f"stage '{stage}' claims output {p} but it does not exist")
        self.files[self._key(p)] = {"sha256": sha256_file(p), "stage": stage}
