"""Flat binary container for named float64 tensors.

Layout: magic ``LOPS``, format version (u32 LE), then one record per
tensor: name byte-length (u32 LE), UTF-8 name, rank (u64 LE), dims
(rank x u64 LE), payload (row-major little-endian f64). Records run to
end of file. Tensors are written in sorted name order so the same state
dict always produces the same bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "MAGIC", "VERSION"]

MAGIC = b"LOPS"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    state: dict[str, np.ndarray] = {}
    pos = 8
    end = len(buf)
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError(f"{path}: truncated record header at byte {pos}")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + name_len + 8 > end:
            raise CheckpointError(f"{path}: truncated record at byte {pos}")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + 8 * rank > end:
            raise CheckpointError(f"{path}: truncated dims for tensor {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 8 * count
        if pos + nbytes > end:
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        if name in state:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        state[name] = arr.astype(np.float64, copy=True)
        pos += nbytes
    return state
