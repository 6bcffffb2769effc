"""Flat binary checkpoints of named float64 arrays.

Layout (all integers little-endian)::

    magic  b"RECRLCK\\0"          8 bytes
    version                      u32
    meta length, meta JSON       u32, utf-8 bytes
    array count                  u32
    per array: name length, name, ndim, dims (u64 each), data ('<f8', C order)
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from recrl.errors import CheckpointError

MAGIC = b"RECRLCK\0"
VERSION = 1


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        pos = 8
        version, n_meta = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(buf[pos : pos + n_meta].decode())
        pos += n_meta
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n_name,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n_name].decode()
            pos += n_name
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise CheckpointError(f"{path} is truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} is corrupt: {e}") from None
    if pos != len(buf):
        raise CheckpointError(f"{path} has trailing bytes")
    return meta, arrays
