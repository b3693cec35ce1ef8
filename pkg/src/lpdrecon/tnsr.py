"""TNSR binary tensor files.

Layout: ``b"TNSR"`` | version u8 (=1) | dtype u8 (1=f32, 2=f64) | ndim u8 |
reserved u8 | ndim x u32 little-endian dims | row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "TnsrError",
    "BadMagicError",
    "UnsupportedVersionError",
    "UnsupportedDtypeError",
    "TruncatedFileError",
    "InvalidShapeError",
    "write_tensor",
    "read_tensor",
    "encode_tensor",
    "decode_tensor",
]

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TnsrError(ValueError):
    code = 1


class BadMagicError(TnsrError):
    code = 2


class UnsupportedVersionError(TnsrError):
    code = 3


class UnsupportedDtypeError(TnsrError):
    code = 4


class TruncatedFileError(TnsrError):
    code = 5


class InvalidShapeError(TnsrError):
    code = 6


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        raise UnsupportedDtypeError(f"only float32/float64 are supported, got {a.dtype}")
    if a.ndim == 0 or a.ndim > 255 or any(n <= 0 for n in a.shape):
        raise InvalidShapeError(f"shape must have 1..255 positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise TnsrError("tensor contains non-finite values")
    header = MAGIC + struct.pack("<BBBB", VERSION, _CODES[a.dtype], a.ndim, 0)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFileError("file shorter than the fixed header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, code, ndim, _ = struct.unpack("<BBBB", buf[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    if ndim == 0:
        raise InvalidShapeError("zero-dimensional tensors are not allowed")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise TruncatedFileError("file ends inside the shape header")
    shape = struct.unpack(f"<{ndim}I", buf[8:end])
    if any(n == 0 for n in shape):
        raise InvalidShapeError(f"empty dimension in shape {shape}")
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end < nbytes:
        raise TruncatedFileError(f"payload has {len(buf) - end} bytes, expected {nbytes}")
    if len(buf) - end > nbytes:
        raise TnsrError("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=end).reshape(shape).astype(
        dtype.newbyteorder("="))


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
