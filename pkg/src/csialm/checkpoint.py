"""Checkpoint files: magic, a JSON header, then named little-endian f32 arrays.

Layout::

    b"CSCK" | u16 version | u32 header length | header (UTF-8 JSON) | payload

The header lists ``entries`` as ``[name, shape, offset]`` with offsets in
bytes from the start of the payload. Keys are sorted and the JSON is
canonical, so equal states give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"CSCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_checkpoint(path, state: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(np.asarray(state[name], dtype="<f4"))
        entries.append([name, list(arr.shape), offset])
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
    raw = header.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise ContractError(f"{path}: truncated checkpoint")
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[_PREFIX.size:_PREFIX.size + n].decode())
    payload = memoryview(data)[_PREFIX.size + n:]
    state = {}
    for name, shape, offset in header["entries"]:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > len(payload):
            raise ContractError(f"{path}: entry {name} runs past the end of the file")
        state[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    return state, header["meta"]
