"""Binary checkpoint format.

Layout: the magic bytes ``ULDA1`` followed by records until end of file.
Each record is ``u32 name_len, name (utf-8), u32 rank, u32 dims[rank],
float32 values`` with all integers and floats little-endian.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"ULDA1"


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors):
    """Write an ordered mapping of name -> array."""
    chunks = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path):
    """Parse a checkpoint into a dict of name -> float32 array.

    Raises :class:`CheckpointError` naming the byte offset of the first
    malformed field.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0 (expected {MAGIC!r})")
    pos = len(MAGIC)
    out = {}

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated {what} at byte {pos}")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    while pos < len(buf):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: undecodable name at byte {start + 4}") from exc
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} at byte {pos - 4}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name!r}"), dtype="<f4")
        out[name] = values.reshape(dims).astype(np.float32)
    return out
