"""Framed binary file helpers shared by the model and dataset formats.

Both formats use the same envelope: 4 magic bytes, a format-version byte,
a payload, and a trailing little-endian CRC-32 of everything before it.
Reads check length, magic, and version before the checksum so that a bumped
version byte is reported as a version error rather than as corruption.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

__all__ = [
    "FileFormatError",
    "load_dataset",
    "read_framed",
    "save_dataset",
    "write_framed",
]


class FileFormatError(ValueError):
    """A file failed structural validation (magic, version, or checksum)."""


def write_framed(path: str | os.PathLike, magic: bytes, version: int, payload: bytes) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    body = magic + bytes([version]) + payload
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(zlib.crc32(body).to_bytes(4, "little"))


def read_framed(path: str | os.PathLike, magic: bytes, version: int) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 1 + 4:
        raise FileFormatError(f"{path}: file too short to contain a checksum")
    if raw[:4] != magic:
        raise FileFormatError(
            f"{path}: bad magic {raw[:4]!r}, expected {magic!r}"
        )
    if raw[4] != version:
        raise FileFormatError(
            f"{path}: format version {raw[4]}, this reader supports version {version}"
        )
    body, tail = raw[:-4], raw[-4:]
    if zlib.crc32(body) != int.from_bytes(tail, "little"):
        raise FileFormatError(f"{path}: checksum mismatch (truncated or corrupt file)")
    return body[5:]


# ---------------------------------------------------------------------------
# dataset files: u16 labels, u8 split tags, little-endian f32 images
# ---------------------------------------------------------------------------

_DATA_MAGIC = b"FSAD"
_DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<IHHHH")  # sample count, H, W, C, num_classes
_SPLIT_CODES = {"train": 0, "eval": 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def save_dataset(dataset, path) -> None:
    """Images are stored as float32, so callers that want bitwise roundtrips
    must hold float32-exact values (the generator guarantees this)."""
    dataset.validate()
    n = len(dataset.images)
    h, w, c = dataset.images.shape[1:]
    header = _DATA_HEADER.pack(n, h, w, c, dataset.num_classes)
    labels = np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes()
    split = bytes(_SPLIT_CODES[tag] for tag in dataset.split)
    images = np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    write_framed(path, _DATA_MAGIC, _DATA_VERSION, header + labels + split + images)


def load_dataset(path):
    from .models import Dataset

    payload = read_framed(path, _DATA_MAGIC, _DATA_VERSION)
    if len(payload) < _DATA_HEADER.size:
        raise FileFormatError(f"{path}: header missing")
    n, h, w, c, num_classes = _DATA_HEADER.unpack_from(payload)
    expected = _DATA_HEADER.size + n * 2 + n + n * h * w * c * 4
    if len(payload) != expected:
        raise FileFormatError(f"{path}: payload size does not match the header")
    pos = _DATA_HEADER.size
    labels = np.frombuffer(payload, dtype="<u2", count=n, offset=pos).astype(np.int64)
    pos += n * 2
    codes = np.frombuffer(payload, dtype=np.uint8, count=n, offset=pos)
    if codes.size and codes.max() > 1:
        raise FileFormatError(f"{path}: unknown split tag code {codes.max()}")
    split = np.array([_SPLIT_NAMES[int(code)] for code in codes])
    pos += n
    images = (
        np.frombuffer(payload, dtype="<f4", count=n * h * w * c, offset=pos)
        .astype(np.float64)
        .reshape(n, h, w, c)
    )
    data = Dataset(images, labels, split, num_classes=num_classes)
    data.validate()
    return data
