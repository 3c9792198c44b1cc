"""NTC1 named-tensor container.

Layout (all integers little-endian)::

    b"NTC1"
    u32   tensor count
    per tensor:
        u16   name length, then UTF-8 name
        u8    dtype code (0=f32, 1=f64, 2=u8, 3=i64)
        u8    rank
        u64   x rank dims
        row-major payload
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"NTC1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
CODES = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


class NtcFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


def _coerce(name, value):
    arr = np.asarray(value)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype(np.int64)
    key = arr.dtype.newbyteorder("=")
    if key not in CODES:
        raise TypeError(f"tensor {name!r}: dtype {arr.dtype} not storable (f32, f64, u8, i64 only)")
    return arr, CODES[key]


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr, code = _coerce(name, value)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if len(buf) < 4:
        raise NtcFormatError("truncated header", len(buf))
    if buf[:3] == b"NTC" and buf[3:4] != b"1":
        raise NtcFormatError(f"unsupported NTC version {buf[3:4]!r}", 3)
    if buf[:4] != MAGIC:
        raise NtcFormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise NtcFormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise NtcFormatError(f"tensor name is not UTF-8: {exc}", start + 2) from None
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in DTYPES:
            raise NtcFormatError(f"tensor {name!r}: unknown dtype code {code}", pos - 2)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise NtcFormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return out


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: dict):
    atomic_write(path, encode(tensors))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())


def text_tensor(s: str):
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def tensor_text(arr) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
