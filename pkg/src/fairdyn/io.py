"""Versioned binary container: a JSON header plus little-endian f64 arrays.

Layout: 8-byte magic, u32 header length, UTF-8 JSON header, then each
array's raw bytes in header order. The header records the schema version,
a caller-supplied metadata dict, and a manifest of (name, shape) entries,
which is enough to reconstruct every array without trusting the payload
length arithmetic.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from fairdyn.core import SCHEMA_VERSION, ValidationError

MAGIC = b"FDYNBIN\x00"


def write_arrays(
    path: str | Path,
    metadata: Mapping[str, object],
    arrays: Mapping[str, np.ndarray],
) -> None:
    """Write named float64 arrays with a metadata header to ``path``."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "fairdyn_schema": SCHEMA_VERSION,
        "metadata": dict(metadata),
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`write_arrays`.

    Returns (metadata, arrays). Raises ValidationError on a bad magic,
    truncated payload, or unsupported schema version.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a fairdyn binary container")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("fairdyn_schema") != SCHEMA_VERSION:
            raise ValidationError(
                f"{path}: unsupported fairdyn_schema {header.get('fairdyn_schema')!r}"
            )
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValidationError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header["metadata"], arrays
