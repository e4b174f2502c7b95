"""Checkpoint container.

Layout (all multi-byte values little-endian)::

    IGLIDE-CKPT\\n                 magic line
    <header JSON>\\n               one line, keys sorted
    <array bytes>                 C-order, concatenated in header order

The header holds ``{"version": 1, "meta": {...}, "arrays": [{"name", "dtype",
"shape", "offset", "nbytes"}, ...]}``; offsets are relative to the first byte
after the header line. Writes go through a temp file and an atomic rename, and
identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"IGLIDE-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<") else a.dtype
        a = a.astype(dt, copy=False)
        raw = a.tobytes(order="C")
        index.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "meta": meta, "arrays": index}
    blob = MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)
    atomic_write_bytes(path, blob)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = data.find(b"\n", len(MAGIC))
    try:
        header = json.loads(data[len(MAGIC) : end])
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    body = memoryview(data)[end + 1 :]
    arrays = {}
    for item in header["arrays"]:
        raw = body[item["offset"] : item["offset"] + item["nbytes"]]
        if len(raw) != item["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {item['name']!r}")
        arrays[item["name"]] = np.frombuffer(raw, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
    return header["meta"], arrays
