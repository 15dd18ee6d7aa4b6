"""Run manifest: per-command digests of inputs and artifacts, guarded by a lock file."""
from __future__ import annotations

import hashlib
import json
import os
import time
import uuid

from filelock import FileLock

from .. import __version__

MANIFEST = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_tree(paths, root) -> dict[str, str]:
    """sha256 of every file under the given files/directories, keyed by path relative to ``root``."""
    out = {}
    for p in paths:
        if os.path.isfile(p):
            out[os.path.relpath(p, root)] = file_digest(p)
        elif os.path.isdir(p):
            for dirpath, _, files in os.walk(p):
                for f in files:
                    full = os.path.join(dirpath, f)
                    out[os.path.relpath(full, root)] = file_digest(full)
    return dict(sorted(out.items()))


def lock(run_dir) -> FileLock:
    os.makedirs(run_dir, exist_ok=True)
    return FileLock(os.path.join(run_dir, MANIFEST + ".lock"))


def read_manifest(run_dir) -> dict:
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.exists(path):
        return {"tool_version": __version__, "commands": {}}
    with open(path) as fh:
        return json.load(fh)


def record(run_dir, command: str, cfg_hash: str, inputs: dict, artifacts: dict, started: float,
           extra: dict | None = None) -> dict:
    """Merge one command's entry into the manifest (atomic replace under the lock)."""
    entry = {
        "run_id": uuid.uuid4().hex,
        "config_hash": cfg_hash,
        "inputs": inputs,
        "artifacts": artifacts,
        "started": started,
        "seconds": round(time.time() - started, 3),
        "tool_version": __version__,
    }
    if extra:
        entry.update(extra)
    with lock(run_dir):
        data = read_manifest(run_dir)
        data["tool_version"] = __version__
        data["commands"][command] = entry
        path = os.path.join(run_dir, MANIFEST)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    return entry
