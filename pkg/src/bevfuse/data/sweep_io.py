"""Binary radar sweep files (``.rswp``).

Little-endian layout: a 20-byte header ``magic "RSWP", u16 version,
u16 reserved, u64 timestamp_us, u32 count`` followed by ``count`` records
of four f32 ``[x, y, rcs, v_d]``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..radar import RadarSweep

MAGIC = b"RSWP"
VERSION = 1
HEADER = struct.Struct("<4sHHQI")
HEADER_SIZE = HEADER.size  # 20
RECORD_DTYPE = np.dtype("<f4")
RECORD_SIZE = 16


class SweepFormatError(ValueError):
    """Base class for malformed sweep files."""


class BadMagicError(SweepFormatError):
    pass


class TruncatedSweepError(SweepFormatError):
    pass


class VersionMismatchError(SweepFormatError):
    pass


class TrailingDataError(SweepFormatError):
    pass


def encode_sweep(sweep: RadarSweep) -> bytes:
    pts = np.ascontiguousarray(sweep.points, dtype=RECORD_DTYPE).reshape(-1, 4)
    if not np.isfinite(pts).all():
        raise ValueError("sweep contains non-finite values")
    return HEADER.pack(MAGIC, VERSION, 0, int(sweep.timestamp_us), len(pts)) + pts.tobytes()


def decode_sweep(buf: bytes) -> RadarSweep:
    if len(buf) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
        raise TruncatedSweepError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, _reserved, ts, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    expected = HEADER_SIZE + RECORD_SIZE * count
    if len(buf) < expected:
        raise TruncatedSweepError(f"{count} records need {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise TrailingDataError(f"{len(buf) - expected} unexpected trailing bytes")
    pts = np.frombuffer(buf, dtype=RECORD_DTYPE, count=4 * count, offset=HEADER_SIZE).reshape(count, 4)
    return RadarSweep(int(ts), pts.copy())


def write_sweep(sweep: RadarSweep, path: Union[str, os.PathLike]) -> None:
    Path(path).write_bytes(encode_sweep(sweep))


def read_sweep(path: Union[str, os.PathLike]) -> RadarSweep:
    return decode_sweep(Path(path).read_bytes())
