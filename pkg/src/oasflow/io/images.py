"""Binary PPM (P6) images, with PNG through Pillow when it is installed."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Return the image as a (1, 3, h, w) float32 array in [0, 1]."""
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if not m:
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad PPM maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * 3
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=m.end())
    img = data.reshape(h, w, 3).astype(np.float32) / maxval
    return np.ascontiguousarray(img.transpose(2, 0, 1))[None]


def to_bytes(img: np.ndarray) -> np.ndarray:
    """(1, 3, h, w) floats in [0, 1] or (h, w, 3) uint8 -> (h, w, 3) uint8."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8 and arr.ndim == 3:
        return arr
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img) -> None:
    rgb = to_bytes(img)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_image(path, img) -> None:
    """Write PPM, or PNG when the suffix asks for it."""
    if Path(path).suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise RuntimeError("PNG output needs Pillow; write a .ppm instead") from exc
        Image.fromarray(to_bytes(img), mode="RGB").save(path)
    else:
        write_ppm(path, img)


def read_image(path) -> np.ndarray:
    if Path(path).suffix.lower() == ".png":
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))[None]
    return read_ppm(path)
