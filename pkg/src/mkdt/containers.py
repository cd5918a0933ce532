"""Shared framing for the binary files (datasets, trajectories, synthetic sets).

Every container starts with an 8-byte ASCII magic and a little-endian u32
version. Readers raise a distinct exception for each way a file can be bad.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, ContainerError, TruncatedError, VersionMismatchError
from .tensor import _read_exact

__all__ = [
    "ContainerError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedError",
    "write_header",
    "read_header",
    "write_u32",
    "read_u32",
    "write_f64",
    "read_f64",
    "write_u32_array",
    "read_u32_array",
    "write_blob",
    "read_blob",
    "expect_eof",
]


def write_header(fh, magic: bytes, version: int = 1) -> None:
    assert len(magic) == 8
    fh.write(magic)
    write_u32(fh, version)


def read_header(fh, magic: bytes, version: int = 1) -> None:
    head = fh.read(8)
    if head != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, found {head!r}")
    found = read_u32(fh)
    if found != version:
        raise VersionMismatchError(f"version mismatch: expected {version}, found {found}")


def write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", int(value)))


def read_u32(fh) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def write_f64(fh, value: float) -> None:
    fh.write(struct.pack("<d", float(value)))


def read_f64(fh) -> float:
    return struct.unpack("<d", _read_exact(fh, 8))[0]


def write_u32_array(fh, values) -> None:
    """Length-prefixed u32 array."""
    arr = np.ascontiguousarray(values, dtype="<u4")
    write_u32(fh, arr.size)
    fh.write(arr.tobytes())


def read_u32_array(fh) -> np.ndarray:
    n = read_u32(fh)
    return np.frombuffer(_read_exact(fh, 4 * n), dtype="<u4").astype(np.int64)


def write_blob(fh, data: bytes) -> None:
    write_u32(fh, len(data))
    fh.write(data)


def read_blob(fh) -> bytes:
    return _read_exact(fh, read_u32(fh))


def expect_eof(fh) -> None:
    if fh.read(1):
        raise ContainerError("trailing bytes after container payload")
