"""Checkpoint container.

Layout (all integers little-endian)::

    b"EPRCKPT1"                 8-byte magic
    header_len                  uint64
    header                      UTF-8 JSON, keys sorted
    array data                  raw bytes, concatenated in header order

The JSON header holds ``meta`` (free-form: model config, train config,
optimizer scalars, loss weights, epoch, seed, RNG state, ...) and
``arrays``: a list of ``{"name", "dtype", "shape", "offset", "nbytes"}``
records, offsets counted from the start of the data section.  Arrays are
stored as C-order little-endian bytes, so float32 values round-trip exactly.
Output depends only on the contents, which makes it byte-reproducible.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EPRCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    records = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        records.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": records}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    base = 16 + hlen
    arrays = {}
    for rec in header["arrays"]:
        start = base + rec["offset"]
        raw = data[start:start + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise CheckpointError(f"checkpoint truncated in array {rec['name']!r}")
        dtype = np.dtype(rec["dtype"]).newbyteorder("<")
        arrays[rec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(rec["shape"]).astype(
            dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
