"""CMFT binary tensor files.

Layout: magic ``CMFT``, rank (uint32 LE), each dimension (uint32 LE), then the
values as float32 LE in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CMFT"


class CMFTError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise CMFTError("not a CMFT tensor (bad magic)")
    if len(buf) < 8:
        raise CMFTError("truncated CMFT header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise CMFTError("truncated CMFT header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != end + 4 * count:
        raise CMFTError(f"payload size {len(buf) - end} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(shape).astype(np.float32)


def save(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def peek_shape(path) -> tuple:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head[:4] != MAGIC or len(head) < 8:
            raise CMFTError(f"{os.fspath(path)}: not a CMFT tensor")
        (rank,) = struct.unpack_from("<I", head, 4)
        return struct.unpack(f"<{rank}I", fh.read(4 * rank))
