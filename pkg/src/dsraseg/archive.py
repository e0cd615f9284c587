"""Tensor archive: one raw little-endian float64 file per tensor plus ``manifest.json``."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "dsraseg-tensor-archive/1"
MANIFEST = "manifest.json"


class ArchiveError(ValueError):
    pass


def _file_name(index: int, name: str) -> str:
    return f"{index:04d}_{re.sub(r'[^A-Za-z0-9_.-]', '_', name)}.bin"


def save_archive(
    directory: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.asarray(arr)
        fname = _file_name(i, name)
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        entries[name] = {"shape": list(arr.shape), "dtype": "float64", "file": fname}
    manifest = {"format": FORMAT, "tensors": entries, "meta": dict(meta or {})}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_archive(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise ArchiveError(f"no {MANIFEST} in {directory}") from e
    except json.JSONDecodeError as e:
        raise ArchiveError(f"corrupt manifest in {directory}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"unsupported archive format {manifest.get('format')!r}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        if entry.get("dtype") != "float64":
            raise ArchiveError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        data = np.fromfile(directory / entry["file"], dtype="<f8")
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError(f"{name}: {data.size} values on disk, shape {shape} needs more or fewer")
        tensors[name] = data.reshape(shape).astype(np.float64)
    return tensors, manifest["meta"]
