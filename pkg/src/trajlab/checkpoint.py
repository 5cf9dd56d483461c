"""Flat binary checkpoints.

Layout (all integers little-endian)::

    b"TJL1"
    u32 n_tensors
    n_tensors x { u16 name_len, name (utf-8), u8 ndim, ndim x u64 dim }
    u32 meta_len, meta (utf-8 JSON)
    tensor data: float64 little-endian, in table order, row-major
    32-byte SHA-256 of every preceding byte

Parameters are stored as ``param/<name>``; the AdamW moments as
``adam_m/<name>`` and ``adam_v/<name>``. The JSON block carries the run
configuration, step counters and stream/smoother state needed for an exact
continuation.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TJL1"


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_raw)))
    parts.append(meta_raw)
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 32 or blob[:4] != MAGIC:
        raise CheckpointError("not a TJL1 checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint digest mismatch (file corrupted or truncated)")
    off = 4
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        table.append((name, tuple(int(s) for s in shape)))
    (ml,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + ml].decode())
    off += ml
    tensors = {}
    for name, shape in table:
        count = math.prod(shape)
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        tensors[name] = arr
        off += 8 * count
    if off != len(body):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(body) - off})")
    return tensors, meta


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
