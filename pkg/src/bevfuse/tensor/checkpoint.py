"""Binary parameter checkpoints.

Layout (little-endian)::

    b"BFCK"  u16 version
    repeated: u16 name_len, name (utf-8), u8 rank, u32 dims[rank], f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"BFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: Dict[str, np.ndarray], path) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(buf) < 6:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, state = 6, {}
    try:
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint record: {exc}") from exc
    return state
