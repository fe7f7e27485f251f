"""``.oasn`` parameter checkpoints.

Layout (little-endian): ``b"OASN"``, u32 version, u32 entry count, then per
entry u32 name length, UTF-8 name, u32 rank, u32 dims, float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..tensor import Param, ParamStore

MAGIC = b"OASN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ParamStore) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        out.append(struct.pack("<I", len(name)) + name)
        out.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> ParamStore:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not an OASN checkpoint (magic {buf[:4]!r})")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * size > len(buf):
            raise CheckpointError(f"truncated payload for {name!r}")
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        store.add(Param(name, data.astype(np.float32)))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return store


def save_checkpoint(path, params: ParamStore) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path) -> ParamStore:
    return decode_checkpoint(Path(path).read_bytes())
