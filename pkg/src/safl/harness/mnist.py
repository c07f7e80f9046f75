"""IDX reader for MNIST-style image and label files (optionally gzipped)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, path, magic: int, ndim: int):
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataError(f"{path}: truncated header, expected {need} bytes at offset 0, file has {len(buf)}")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need]), need


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(path)
    (count, rows, cols), off = _header(buf, path, IMAGE_MAGIC, 3)
    size = count * rows * cols
    if len(buf) < off + size:
        raise DataError(f"{path}: truncated pixel data at byte offset {len(buf)}, expected {off + size} bytes")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=off)
    return pixels.reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (count,), off = _header(buf, path, LABEL_MAGIC, 1)
    if len(buf) < off + count:
        raise DataError(f"{path}: truncated label data at byte offset {len(buf)}, expected {off + count} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off).astype(np.int64)


def load_mnist_idx(images_path, labels_path):
    """Return (features in [0, 1] of shape (n, rows*cols), labels)."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise DataError(f"image count {raw.shape[0]} does not match label count {labels.shape[0]}")
    if labels.size and labels.max() > 9:
        raise DataError("labels outside 0..9")
    return raw.astype(np.float64) / 255.0, labels


def write_idx(path, array: np.ndarray, labels: bool = False) -> None:
    """Write uint8 data as IDX; used to build test fixtures."""
    a = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        if labels:
            fh.write(struct.pack(">II", LABEL_MAGIC, a.shape[0]))
        else:
            fh.write(struct.pack(">IIII", IMAGE_MAGIC, *a.shape))
        fh.write(a.tobytes())
