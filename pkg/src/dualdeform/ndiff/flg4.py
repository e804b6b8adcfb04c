"""FLG4 binary tensor files.

Layout: magic ``FLG4``, u32 version, u32 rank, rank x u64 extents, then the
values in row-major order, all little-endian. Version 1 stores float32
values; version 2 stores float64 and is used for checkpoints so that a
reload reproduces double-precision parameters exactly.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError, InputError

MAGIC = b"FLG4"
_DTYPES = {1: "<f4", 2: "<f8"}

PathLike = Union[str, os.PathLike]


def encode_flg4(array: np.ndarray, version: int = 1) -> bytes:
    if version not in _DTYPES:
        raise FormatError(f"unsupported FLG4 version {version}")
    arr = np.ascontiguousarray(array, dtype=_DTYPES[version])
    head = MAGIC + struct.pack("<II", version, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_flg4(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad FLG4 magic")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version not in _DTYPES:
        raise FormatError(f"{source}: unsupported FLG4 version {version}")
    off = 12 + 8 * rank
    if len(buf) < off:
        raise FormatError(f"{source}: truncated FLG4 header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    dtype = np.dtype(_DTYPES[version])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + count * dtype.itemsize:
        raise FormatError(f"{source}: payload size does not match extents {shape}")
    values = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return values.astype(np.float64).reshape(shape)


def write_flg4(path: PathLike, array: np.ndarray, version: int = 1) -> None:
    Path(path).write_bytes(encode_flg4(array, version))


def read_flg4(path: PathLike) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing tensor file {p}")
    return decode_flg4(p.read_bytes(), str(p))
