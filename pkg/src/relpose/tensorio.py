"""Binary formats for parameter checkpoints (RPCK) and raw tensors (RPTN).

Both are little-endian with float32 payloads in row-major order.

RPCK::

    b"RPCK" | u32 count | count x (u16 name_len | name utf-8 | u8 ndim | ndim x u32 | f32 data)

RPTN::

    b"RPTN" | u32 ndim | ndim x u32 | f32 data
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from relpose.errors import FormatError

CKPT_MAGIC = b"RPCK"
TENSOR_MAGIC = b"RPTN"


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _f32_payload(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(_f32_payload(arr))
    return out.getvalue()


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    f = io.BytesIO(blob)
    if _read_exact(f, 4) != CKPT_MAGIC:
        raise FormatError("not an RPCK checkpoint (bad magic)")
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if f.read(1):
        raise FormatError("trailing bytes after last checkpoint entry")
    return tensors


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    _atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    return TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + _f32_payload(arr)


def decode_tensor(blob: bytes) -> np.ndarray:
    f = io.BytesIO(blob)
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("not an RPTN tensor (bad magic)")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    size = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if f.read(1):
        raise FormatError("trailing bytes after RPTN payload")
    return data


def save_tensor(path, arr) -> None:
    _atomic_write(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def _atomic_write(path, blob: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
