"""Run manifests: every CLI invocation freezes its resolved configuration so
any experiment can be re-run bit-identically from the manifest alone."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .errors import DataError

PACKAGE_VERSION = "0.1.0"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_manifest(out_dir: str | Path, command: str, config: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "package_version": PACKAGE_VERSION,
        "created_unix": int(time.time()),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


def read_manifest(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
