"""Image I/O: 8-bit PNG for dataset frames and a small raw float32 dump
format for exact test comparisons.

Raw layout (little-endian): magic b"RAWF", u32 version, u32 height, u32
width, u32 channels, then float32 pixel data in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import DatasetError

RAW_MAGIC = b"RAWF"
RAW_VERSION = 1


def quantize(img):
    """Float [0,1] image to uint8, round-half-away like PIL expects."""
    return (np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0
            + 0.5).astype(np.uint8)


def save_png(path, img):
    Image.fromarray(quantize(img), mode="RGB").save(path)


def load_png(path):
    """Decode to float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise DatasetError(f"image file missing: {path}")
    return arr / 255.0


def save_raw(path, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<IIII", RAW_VERSION, h, w, c))
        f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_raw(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RAW_MAGIC:
            raise DatasetError(f"{path}: not a raw image dump")
        version, h, w, c = struct.unpack("<IIII", f.read(16))
        if version != RAW_VERSION:
            raise DatasetError(f"{path}: raw dump version {version} unsupported")
        data = f.read(h * w * c * 4)
        if len(data) != h * w * c * 4:
            raise DatasetError(f"{path}: truncated raw dump")
    img = np.frombuffer(data, dtype="<f4").reshape(h, w, c).astype(np.float64)
    return img[..., 0] if c == 1 else img
