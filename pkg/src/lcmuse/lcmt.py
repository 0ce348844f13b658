"""LCMT portable tensor files.

Layout (all little-endian): magic bytes ``LCMT``, version ``u16``, dtype
code ``u16`` (1 = float32, 2 = float64), rank ``u32``, one ``u64`` per
dimension, then the row-major payload. Several records may be concatenated
in one file; :func:`read_tensors` reads them all.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .exceptions import ConfigError

__all__ = ["write_tensor", "write_tensors", "read_tensor", "read_tensors"]

MAGIC = b"LCMT"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ConfigError(f"LCMT supports float32/float64 tensors, got dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<HHI", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C"))


def _read_record(fh: BinaryIO) -> np.ndarray | None:
    head = fh.read(4)
    if not head:
        return None
    if head != MAGIC:
        raise ConfigError(f"not an LCMT record: bad magic {head!r}")
    version, code, rank = struct.unpack("<HHI", fh.read(8))
    if version != VERSION:
        raise ConfigError(f"unsupported LCMT version {version}")
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise ConfigError(f"unknown LCMT dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ConfigError("truncated LCMT payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write one tensor to ``path``."""
    with open(path, "wb") as fh:
        _write_record(fh, np.asarray(arr))


def write_tensors(path: str | Path, arrays: Sequence[np.ndarray]) -> None:
    """Write several tensors to ``path`` as concatenated records."""
    with open(path, "wb") as fh:
        for arr in arrays:
            _write_record(fh, np.asarray(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a single-tensor file; error if it holds zero or several records."""
    tensors = read_tensors(path)
    if len(tensors) != 1:
        raise ConfigError(f"{path}: expected exactly one LCMT record, found {len(tensors)}")
    return tensors[0]


def read_tensors(path: str | Path) -> list[np.ndarray]:
    """Read every record in ``path``."""
    with open(path, "rb") as fh:
        data = fh.read()
    out: list[np.ndarray] = []
    buf = io.BytesIO(data)
    while True:
        arr = _read_record(buf)
        if arr is None:
            return out
        out.append(arr)
