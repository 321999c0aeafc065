"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    magic   b"MCCK"
    u16     format version
    u32     metadata length, then that many bytes of UTF-8 JSON
    u32     tensor count
    per tensor: u16 name length, name (UTF-8), u8 ndim, u32 * ndim shape,
                u64 payload offset in bytes
    payload: float32 little-endian tensors, concatenated in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    # asarray keeps 0-d shapes; tobytes always writes C order
    arrays = [(name, np.asarray(arr, dtype="<f4")) for name, arr in tensors.items()]
    header = bytearray(MAGIC)
    header += struct.pack("<HI", VERSION, len(meta)) + meta
    header += struct.pack("<I", len(arrays))
    offset = 0
    for name, arr in arrays:
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, metadata)``."""
    buf = Path(path).read_bytes()
    try:
        return _parse(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt header ({exc})") from None


def _parse(buf: bytes, path):
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    version, meta_len = struct.unpack_from("<HI", buf, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 6
    metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        table.append((name, shape, offset))
    tensors = {}
    for name, shape, offset in table:
        n = int(np.prod(shape)) if shape else 1
        if pos + offset + 4 * n > len(buf):
            raise CheckpointError(f"{path}: payload for {name!r} is truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos + offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return tensors, metadata
