"""Versioned binary checkpoints.

Layout::

    b"CLVSACKP"                 8-byte magic
    uint32 little-endian        format version (1)
    uint64 little-endian        header length N
    N bytes                     UTF-8 JSON header, keys sorted:
                                {"config": {...}, "tensors": [{"name", "shape", "offset"}]}
    ...                         concatenated little-endian float64 tensor data

Offsets are in bytes from the start of the data section. Tensors appear in
the order they were given, so identical inputs give identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CLVSACKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    data = raw[start + hlen:]
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return params, header["config"]
