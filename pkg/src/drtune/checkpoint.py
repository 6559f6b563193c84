"""Binary checkpoint format (little-endian).

    magic   b"DRTL"
    version u32
    count   u32
    count x { name_len u16, name utf-8, rank u8, dims u32 * rank, f64 * prod(dims) row-major }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"DRTL"
VERSION = 1


def save_blocks(path, blocks: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError("block name or rank too large", name=name)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint: {exc}", path=str(path)) from exc


def load_blocks(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}", path=str(path)) from exc
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic", path=str(path))
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError("unsupported checkpoint version", path=str(path), version=version)
        off = 12
        blocks = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
            blocks[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}", path=str(path)) from exc
    return blocks
