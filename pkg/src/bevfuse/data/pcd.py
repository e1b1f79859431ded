"""ASCII point-cloud (PCD) importer for radar detections."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from ..radar import RadarSweep, radial_velocity

DEFAULT_FIELDS = {"x": "x", "y": "y", "rcs": "rcs", "vx": "vx_comp", "vy": "vy_comp"}


class PcdError(ValueError):
    pass


class PcdFieldError(PcdError):
    pass


def parse_pcd_header(lines) -> Dict[str, str]:
    header = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        header[key.upper()] = value.strip()
        if key.upper() == "DATA":
            break
    return header


def import_ascii_pcd(path, field_map: Mapping[str, str] = DEFAULT_FIELDS, timestamp_us: int = 0,
                     sensor_xy=(0.0, 0.0)) -> RadarSweep:
    """Read an ASCII PCD radar file into a sweep with v_d from compensated velocity.

    ``field_map`` maps ``x, y, rcs, vx, vy`` to column names in the file.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as err:
        raise PcdError(f"{path}: non-ASCII content (binary PCD is not supported)") from err
    lines = text.splitlines()
    header = parse_pcd_header(lines)
    if "FIELDS" not in header or "DATA" not in header:
        raise PcdError(f"{path}: missing FIELDS or DATA header line")
    if header["DATA"].lower() != "ascii":
        raise PcdError(f"{path}: DATA {header['DATA']} is not supported, only ascii")
    fields = header["FIELDS"].split()
    missing = [k for k in ("x", "y", "rcs", "vx", "vy") if field_map.get(k) not in fields]
    if missing:
        raise PcdFieldError(f"{path}: fields {missing} not present (file has {fields})")
    start = next(i for i, l in enumerate(lines) if l.strip().upper().startswith("DATA")) + 1
    rows = [l.split() for l in lines[start:] if l.strip()]
    if any(len(r) != len(fields) for r in rows):
        raise PcdError(f"{path}: row width does not match {len(fields)} fields")
    data = np.array(rows, dtype=np.float64).reshape(-1, len(fields))
    col = {k: data[:, fields.index(field_map[k])] for k in ("x", "y", "rcs", "vx", "vy")}
    vd = radial_velocity(col["x"], col["y"], col["vx"], col["vy"], sensor_xy)
    return RadarSweep(timestamp_us, np.column_stack([col["x"], col["y"], col["rcs"], vd]))
