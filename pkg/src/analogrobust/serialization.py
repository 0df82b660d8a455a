"""Flat little-endian binary container with a JSON manifest.

``<stem>.bin`` holds the raw arrays back to back; ``<stem>.json`` lists
``{name, shape, dtype, offset, nbytes}`` per entry plus free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IngestionError

_DTYPES = {"float32": "<f4", "int64": "<i8", "int32": "<i4", "uint8": "u1", "float64": "<f8"}


def sibling(stem, suffix: str) -> Path:
    """``stem`` plus ``suffix``; dots inside the stem are kept."""
    stem = Path(stem)
    return stem.with_name(stem.name + suffix)


def save_arrays(stem, arrays: Mapping[str, np.ndarray], metadata: dict | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(sibling(stem, ".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.name
            if dtype not in _DTYPES:
                raise TypeError(f"unsupported dtype {dtype} for {name}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {"format": "analogrobust-arrays/1", "entries": entries, "metadata": metadata or {}}
    manifest_path = sibling(stem, ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return sibling(stem, ".bin"), manifest_path


def load_arrays(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = json.loads(sibling(stem, ".json").read_text())
    blob = sibling(stem, ".bin").read_bytes()
    arrays = {}
    for entry in manifest["entries"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise IngestionError(f"entry {entry['name']!r} truncated", offset=len(blob))
        arr = np.frombuffer(blob[entry["offset"] : end], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return arrays, manifest.get("metadata", {})


def content_hash(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and little-endian bytes, in key order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
    return h.hexdigest()
