"""Image, mask and depth-grid file formats."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"TPDP"
_DEPTH_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_rgb(path, rgb) -> None:
    arr = rgb if np.asarray(rgb).dtype == np.uint8 else to_uint8(rgb)
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path, format="PNG")


def write_mask(path, mask) -> None:
    arr = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def write_gray(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    """float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_rgb_u8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_gray(path) -> np.ndarray:
    """float64 (H, W) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def read_mask(path, threshold: int = 128) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= threshold


def write_depth(path, depth) -> None:
    d = np.ascontiguousarray(np.asarray(depth, dtype="<f4"))
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        f.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, _ = _DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth grid (magic {magic!r})")
    data = np.frombuffer(raw, dtype="<f4", offset=_DEPTH_HEADER.size)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)
