"""Single-file checkpoint format.

Layout (all integers little-endian):

    bytes 0..7    magic b"LPCKPT1\\n"
    bytes 8..11   uint32 length N of the manifest
    N bytes       UTF-8 JSON manifest:
                    {"params": [{"name": str, "shape": [int, ...]}, ...],
                     "scalars": {...}}
    remainder     one raw little-endian float64 buffer per manifest entry,
                  row-major, concatenated in manifest order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LPCKPT1\n"


def save_checkpoint(path, params: Mapping[str, np.ndarray], scalars: Mapping | None = None) -> None:
    manifest = {
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()],
        "scalars": dict(scalars or {}),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (blob_len,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12:12 + blob_len].decode("utf-8"))
    params: dict[str, np.ndarray] = {}
    offset = 12 + blob_len
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated buffer for {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, manifest["scalars"]
