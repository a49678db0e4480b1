"""Flat binary tensor files.

Layout: 8-byte little-endian header length, a UTF-8 JSON header
``{"tensors": [{"name", "shape", "offset"}, ...], "meta": {...}}``, then the
concatenated little-endian float64 payloads. Offsets are byte offsets into
the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

_DTYPE = np.dtype("<f8")


def save_tensors(path, tensors: dict, meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=_DTYPE))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no tensor file at {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise LoadError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: unreadable header") from exc
    payload = raw[8 + hlen:]
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + count * _DTYPE.itemsize
        if end > len(payload):
            raise LoadError(f"{path}: tensor {entry['name']} runs past end of file")
        out[entry["name"]] = np.frombuffer(payload[start:end], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return out, header.get("meta", {})


def save_module(path, module, meta: dict | None = None):
    save_tensors(path, module.state_dict(), meta)


def load_module(path, module) -> dict:
    state, meta = load_tensors(path)
    module.load_state_dict(state)
    return meta
