"""Shared binary tensor-block encoding used by checkpoint and probe files.

Per tensor: u64 name length, UTF-8 name bytes, u64 rank, u64 dims,
then raw little-endian float32 data in C order. Tensors are written sorted
by name so serialization is byte-deterministic.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np
import torch


def write_named_tensors(f: BinaryIO, tensors: dict[str, torch.Tensor]) -> None:
    for name in sorted(tensors):
        data = tensors[name].detach().to(torch.float32).contiguous().numpy()
        if not np.isfinite(data).all():
            raise ValueError(f"non-finite values in tensor {name}")
        raw = name.encode("utf-8")
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        f.write(struct.pack("<Q", data.ndim))
        f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        f.write(data.astype("<f4").tobytes())


def read_named_tensors(f: BinaryIO, count: int, what: str) -> dict[str, torch.Tensor]:
    def take(n: int) -> bytes:
        raw = f.read(n)
        if len(raw) != n:
            raise ValueError(f"corrupt {what}: truncated")
        return raw

    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        numel = 1
        for s in shape:
            numel *= s
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(shape)
        if not np.isfinite(arr).all():
            raise ValueError(f"corrupt {what}: non-finite tensor {name}")
        out[name] = torch.from_numpy(arr.copy())
    if f.read(1):
        raise ValueError(f"corrupt {what}: trailing bytes")
    return out
