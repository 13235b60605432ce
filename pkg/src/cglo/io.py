"""Binary image/sinogram files and PNG previews.

``CTI1`` (image) and ``CTS1`` (sinogram) files are little-endian: a 4-byte
magic, two ``u32`` dimensions, then ``f32`` values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import IngestionError

IMAGE_MAGIC = b"CTI1"
SINOGRAM_MAGIC = b"CTS1"


def _write(path, magic: bytes, a: np.ndarray) -> Path:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to write non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", *a.shape))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def _read(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise IngestionError(f"{path}: missing {magic.decode()} header")
    rows, cols = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * rows * cols:
        raise IngestionError(f"{path}: truncated payload for {rows}x{cols} values")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)


def write_image(path, image) -> Path:
    return _write(path, IMAGE_MAGIC, image)


def read_image(path) -> np.ndarray:
    return _read(path, IMAGE_MAGIC)


def write_sinogram(path, sinogram) -> Path:
    return _write(path, SINOGRAM_MAGIC, sinogram)


def read_sinogram(path) -> np.ndarray:
    return _read(path, SINOGRAM_MAGIC)


def write_png(path, image) -> tuple[Path, Path]:
    """16-bit min-max scaled preview plus a ``.json`` sidecar with the scaling."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    u16 = np.round(scaled * 65535.0).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(u16).save(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"min": lo, "max": hi, "bits": 16}, sort_keys=True))
    return path, sidecar


def read_png(path) -> np.ndarray:
    """Grayscale PNG as floats in [0, 1] (8- or 16-bit)."""
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64)
            return a / 65535.0
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        raise IngestionError(f"{path}: unsupported PNG mode {im.mode!r} (need grayscale)")
