"""Middlebury ``.flo`` files: float32 sentinel 202021.25, int32 width, int32 height, then (u, v) per pixel."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

SENTINEL = 202021.25
MAGIC = struct.pack("<f", SENTINEL)  # b"PIEH"


class FloFormatError(ValueError):
    pass


def _as_hw2(flow) -> np.ndarray:
    arr = np.asarray(getattr(flow, "data", flow))
    if arr.ndim == 4:
        if arr.shape[0] != 1 or arr.shape[1] != 2:
            raise ValueError(f"expected a single (1, 2, h, w) flow, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"expected a (2, h, w) flow, got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4")


def encode_flo(flow) -> bytes:
    hw2 = _as_hw2(flow)
    h, w = hw2.shape[:2]
    return MAGIC + struct.pack("<ii", w, h) + hw2.tobytes()


def decode_flo(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise FloFormatError(f"flo header needs 12 bytes, got {len(buf)}")
    if buf[:4] != MAGIC:
        raise FloFormatError(f"bad flo sentinel {buf[:4]!r}, expected {MAGIC!r}")
    w, h = struct.unpack("<ii", buf[4:12])
    if w <= 0 or h <= 0:
        raise FloFormatError(f"invalid flo dimensions {w}x{h}")
    want = 12 + 8 * w * h
    if len(buf) < want:
        raise FloFormatError(f"truncated flo payload: {len(buf)} bytes, need {want} for {w}x{h}")
    data = np.frombuffer(buf, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1))[None].astype(np.float32)


def write_flo(path, flow) -> None:
    Path(path).write_bytes(encode_flo(flow))


def read_flo(path) -> np.ndarray:
    """Return the flow as a (1, 2, h, w) float32 array."""
    return decode_flo(Path(path).read_bytes())
