"""On-disk formats: raw float arrays, 16-bit PNG slices, checkpoints, atomic writes.

Raw array layout (little-endian)::

    bytes 0..3    magic b"GRCF"
    bytes 4..7    u32 format version
    bytes 8..11   u32 height
    bytes 12..15  u32 width
    bytes 16..    float32 payload, row-major

Checkpoint layout (little-endian)::

    bytes 0..3    magic b"GRCK"
    bytes 4..7    u32 format version
    bytes 8..15   u64 header length in bytes
    header        UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset", "count"}]}
    payload       contiguous float32 blobs; offsets are relative to the payload start
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np
from PIL import Image

from .errors import ValidationError

RAW_MAGIC = b"GRCF"
RAW_VERSION = 1
CKPT_MAGIC = b"GRCK"
CKPT_VERSION = 1

# Quantization step of the 16-bit PNG slice format.
PNG_LEVELS = 65535


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike) -> Iterator[Path]:
    """Yield a temp path in the destination directory; rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_bytes_atomic(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def write_json_atomic(path, obj: Any) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def encode_raw(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValidationError(f"raw arrays are 2D, got shape {array.shape}")
    h, w = array.shape
    header = RAW_MAGIC + struct.pack("<III", RAW_VERSION, h, w)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_raw(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 16 or data[:4] != RAW_MAGIC:
        raise ValidationError(f"{source}: not a GRCF raw array")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != RAW_VERSION:
        raise ValidationError(f"{source}: unsupported raw version {version}")
    payload = data[16:]
    if len(payload) != 4 * h * w:
        raise ValidationError(f"{source}: payload holds {len(payload)} bytes, header implies {4 * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def save_raw(path, array: np.ndarray) -> None:
    write_bytes_atomic(path, encode_raw(array))


def load_raw(path) -> np.ndarray:
    return decode_raw(Path(path).read_bytes(), source=str(path))


def save_png16(path, array: np.ndarray) -> None:
    """Store an array in [0, 1] as a 16-bit grayscale PNG."""
    array = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    q = np.rint(array * PNG_LEVELS).astype(np.uint16)
    with atomic_path(path) as tmp:
        Image.fromarray(q).save(tmp, format="PNG")


def load_png16(path) -> np.ndarray:
    """Return the raw integer levels of a grayscale PNG as float64."""
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64)


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise ValidationError(f"{source}: not a GRCK checkpoint")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CKPT_VERSION:
        raise ValidationError(f"{source}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(data)[16 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        stop = start + 4 * entry["count"]
        if stop > len(payload):
            raise ValidationError(f"{source}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    return tensors, header["meta"]


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    write_bytes_atomic(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode_checkpoint(Path(path).read_bytes(), source=str(path))
