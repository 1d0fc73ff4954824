"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"RSGRU1\\n"
    count
    repeated count times:
        name length, name (utf-8), rank, extents[rank], values (float32 LE)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelParams, from_named, named_tensors

MAGIC = b"RSGRU1\n"
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def checkpoint_size(named: dict[str, np.ndarray]) -> int:
    """Exact byte size of the file :func:`save_checkpoint` writes."""
    size = len(MAGIC) + 4
    for name, arr in named.items():
        size += 4 + len(name.encode()) + 4 + 4 * np.ndim(arr) + 4 * np.size(arr)
    return size


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    named = named_tensors(params)
    chunks = [MAGIC, _U32.pack(len(named))]
    for name, arr in named.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode()
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(d) for d in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def read_tensors(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path} is truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    out: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path} has {len(buf) - pos} trailing bytes")
    return out


def load_checkpoint(path) -> ModelParams:
    named = read_tensors(path)
    try:
        return from_named(named)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
