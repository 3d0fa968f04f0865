"""Run manifests: every command writes one JSON file recording the command,
its fully resolved configuration, the seed, and a content hash for each
produced artifact, so a run can be audited and verified after the fact."""

import hashlib
import json
import os
import time

from .errors import ConfigurationError


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Collects artifacts during a command and lands as manifest.json."""

    def __init__(self, command, config, seed, run_dir):
        self.command = command
        self.config = config
        self.seed = seed
        self.run_dir = run_dir
        self.artifacts = {}

    def add(self, path):
        """Register a produced file; records its path and digest."""
        rel = os.path.relpath(path, self.run_dir)
        self.artifacts[rel] = file_sha256(path)
        return path

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def save(self):
        path = os.path.join(self.run_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @staticmethod
    def verify(run_dir):
        """Re-hash every artifact listed by the manifest; raises on any
        mismatch or missing file."""
        path = os.path.join(run_dir, "manifest.json")
        with open(path) as fh:
            data = json.load(fh)
        for rel, digest in data["artifacts"].items():
            target = os.path.join(run_dir, rel)
            if not os.path.isfile(target):
                raise ConfigurationError(f"manifest artifact missing: {rel}")
            actual = file_sha256(target)
            if actual != digest:
                raise ConfigurationError(
                    f"artifact hash mismatch for {rel}: "
                    f"recorded {digest[:12]}, found {actual[:12]}"
                )
        return data


def config_hash(config_dict):
    """Short stable hash of a resolved configuration."""
    blob = json.dumps(config_dict, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def new_run_dir(base, command, config_dict):
    """Append-only run directory named by timestamp, command, and config
    hash; a name collision gets a numeric suffix instead of reuse."""
    os.makedirs(base, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    stem = f"{command}_{stamp}_{config_hash(config_dict)}"
    path = os.path.join(base, stem)
    k = 1
    while os.path.exists(path):
        path = os.path.join(base, f"{stem}_{k}")
        k += 1
    os.makedirs(path)
    return path
