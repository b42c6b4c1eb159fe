"""Checkpoint directories: a manifest plus one raw little-endian file per array.

The manifest pins names, shapes, dtypes, per-array SHA-256 and the config
fingerprint; loading re-verifies every hash and refuses on any mismatch,
naming the offending array.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _little_endian(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype
    if dt.byteorder == ">":
        return arr.astype(dt.newbyteorder("<"))
    return arr


def save_arrays(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    *,
    epoch: int,
    config_fingerprint: str,
    extras: dict[str, Any] | None = None,
) -> Path:
    out = Path(path)
    (out / "arrays").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(sorted(arrays)):
        # asarray(..., order="C") keeps 0-d scalars 0-d (ascontiguousarray does not)
        arr = _little_endian(np.asarray(arrays[name], order="C"))
        rel = f"arrays/{i:05d}.bin"
        data = arr.tobytes()
        (out / rel).write_bytes(data)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "file": rel,
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        )
    manifest = {
        "format": FORMAT_VERSION,
        "epoch": int(epoch),
        "config_fingerprint": config_fingerprint,
        "extras": extras or {},
        "arrays": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_arrays(
    path: str | Path,
    *,
    expected_fingerprint: str | None = None,
) -> tuple[dict[str, np.ndarray], int, dict[str, Any]]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    fp = manifest.get("config_fingerprint")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint has {fp}, supplied config resolves to {expected_fingerprint}"
        )
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        file = root / entry["file"]
        if not file.is_file():
            raise CheckpointError(f"checkpoint array {entry['name']!r} is missing ({entry['file']})")
        data = file.read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if digest != entry["sha256"]:
            raise CheckpointError(f"checkpoint array {entry['name']!r} failed its hash check")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, int(manifest["epoch"]), manifest.get("extras", {})


def checkpoint_fingerprint(path: str | Path) -> str:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    return manifest["config_fingerprint"]
