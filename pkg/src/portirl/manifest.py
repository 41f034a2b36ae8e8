"""Run manifests: content-hashed artifact bookkeeping for the CLI.

Every command records what it read, what it wrote and the exact settings it
ran with into ``run.json`` under the output directory. Paths are stored as
names relative to that directory and nothing time- or host-dependent is ever
written, so two runs with identical inputs produce byte-identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import os

from . import __version__

MANIFEST_NAME = "run.json"


def file_hash(path) -> str:
    """Hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(out_dir) -> str:
    return os.path.join(out_dir, MANIFEST_NAME)


def load(out_dir) -> dict:
    """Current manifest of the run directory, or a fresh skeleton."""
    path = manifest_path(out_dir)
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    return {"tool": f"portirl {__version__}", "commands": {}}


def record(
    out_dir,
    command: str,
    seed: int,
    config: dict,
    inputs: list[str],
    outputs: list[str],
) -> dict:
    """Hash the listed files and write the updated manifest.

    ``inputs``/``outputs`` are file paths; each is keyed by its name relative
    to ``out_dir`` (bare name for files living elsewhere).
    """

    def key_of(path: str) -> str:
        rel = os.path.relpath(path, out_dir)
        return rel if not rel.startswith("..") else os.path.basename(path)

    entry = {
        "seed": int(seed),
        "config": {str(k): str(v) for k, v in sorted(config.items())},
        "inputs": {key_of(p): file_hash(p) for p in sorted(inputs)},
        "outputs": {key_of(p): file_hash(p) for p in sorted(outputs)},
    }
    manifest = load(out_dir)
    manifest["commands"][command] = entry
    with open(manifest_path(out_dir), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
