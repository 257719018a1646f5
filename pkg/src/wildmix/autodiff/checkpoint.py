"""Named-tensor checkpoint files.

Layout: a magic line, one line of UTF-8 JSON header text (holds the model
config and its digest), then a little-endian u32 tensor count followed by
``{u32 name length, name bytes, u32 rank, u32 dims..., float32 values}``
per tensor.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import IncompatibleCheckpointError

MAGIC = b"WILDMIX-CKPT 1\n"


def save_tensors(path, tensors: dict, header: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> tuple:
    """Return ``(header, {name: float32 array})``."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise IncompatibleCheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            buf = fh.read(4 * size)
            if len(buf) != 4 * size:
                raise IncompatibleCheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
    return header, tensors
