"""On-disk dataset layout.

::

    <root>/manifest.json            generator config, sample ids, sha256 of every file
    <root>/calib.json               camera name -> intrinsics / extrinsics
    <root>/samples/<id>/cam<i>.ppm  binary P6, 8-bit RGB
    <root>/samples/<id>/radar_<k>.rswp   k = 0 is the newest sweep
    <root>/samples/<id>/boxes.json
    <root>/samples/<id>/meta.json   timestamp, description, sweep ego poses
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from ..geometry import Box3D, load_calibration, save_calibration
from ..radar import RadarSweep
from .sweep_io import read_sweep, write_sweep
from .synthetic import SampleBundle, SceneGenConfig, generate_scene

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Missing, malformed or tampered dataset files."""


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] (or uint8) as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def _ppm_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file as float32 (H, W, 3) in [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise DatasetError(f"{path}: not a binary PPM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos) if len(buf) - pos >= w * h * 3 else None
    if data is None:
        raise DatasetError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_sample(bundle: SampleBundle, sample_dir: Path) -> List[Path]:
    sample_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(bundle.images):
        p = sample_dir / f"cam{i}.ppm"
        write_ppm(p, img)
        written.append(p)
    for k, sweep in enumerate(bundle.sweeps):
        p = sample_dir / f"radar_{k}.rswp"
        write_sweep(sweep, p)
        written.append(p)
    p = sample_dir / "boxes.json"
    p.write_text(json.dumps([b.to_dict() for b in bundle.boxes], indent=1))
    written.append(p)
    meta = {
        "sample_id": bundle.sample_id,
        "timestamp_us": int(bundle.timestamp_us),
        "description": bundle.description,
        "num_cameras": len(bundle.images),
        "num_sweeps": len(bundle.sweeps),
        "sweep_poses": [list(s.ego_pose) if s.ego_pose is not None else None for s in bundle.sweeps],
    }
    p = sample_dir / "meta.json"
    p.write_text(json.dumps(meta, indent=1))
    written.append(p)
    return written


def write_dataset(cfg: SceneGenConfig, root, num_samples: int, start: int = 0) -> Path:
    """Generate ``num_samples`` scenes (t = start .. start + n - 1) into ``root``."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    names = [c.name for c in cfg.cameras]
    save_calibration(dict(zip(names, cfg.camera_models())), root / "calib.json")
    checksums, ids = {}, []
    for t in range(start, start + num_samples):
        bundle = generate_scene(cfg, t)
        ids.append(bundle.sample_id)
        for p in write_sample(bundle, root / "samples" / bundle.sample_id):
            checksums[p.relative_to(root).as_posix()] = _sha256(p)
    checksums["calib.json"] = _sha256(root / "calib.json")
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "start": start,
        "num_samples": num_samples,
        "class_names": list(cfg.class_names),
        "camera_names": names,
        "generator": cfg.to_dict(),
        "samples": ids,
        "checksums": checksums,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log.info("wrote %d samples to %s", num_samples, root)
    return root


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, root, verify: bool = False):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise DatasetError(f"{self.root}: no manifest.json")
        try:
            self.manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{mpath}: {e}") from e
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format {self.manifest.get('format_version')}")
        self.sample_ids: List[str] = list(self.manifest["samples"])
        self.class_names = tuple(self.manifest["class_names"])
        calib = load_calibration(self.root / "calib.json")
        self.camera_names = list(self.manifest.get("camera_names", sorted(calib)))
        self.cameras = [calib[n] for n in self.camera_names]
        if verify:
            self.verify()

    @property
    def generator_config(self) -> SceneGenConfig:
        return SceneGenConfig.from_dict(self.manifest["generator"])

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self) -> Iterator[SampleBundle]:
        for sid in self.sample_ids:
            yield self.load(sid)

    def verify(self) -> None:
        """Raise ``DatasetError`` listing every missing or modified file."""
        bad = []
        for rel, digest in self.manifest["checksums"].items():
            p = self.root / rel
            if not p.exists():
                bad.append(f"missing {rel}")
            elif _sha256(p) != digest:
                bad.append(f"checksum mismatch {rel}")
        if bad:
            raise DatasetError("; ".join(bad[:10]) + (f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""))

    def load_boxes(self, sample_id: str) -> List[Box3D]:
        d = json.loads((self.root / "samples" / sample_id / "boxes.json").read_text())
        return [Box3D.from_dict(b) for b in d]

    def load_meta(self, sample_id: str) -> dict:
        return json.loads((self.root / "samples" / sample_id / "meta.json").read_text())

    def load(self, sample_id: str, sweeps: Optional[int] = None) -> SampleBundle:
        sdir = self.root / "samples" / sample_id
        if not sdir.is_dir():
            raise DatasetError(f"unknown sample {sample_id}")
        meta = self.load_meta(sample_id)
        images = np.stack([read_ppm(sdir / f"cam{i}.ppm") for i in range(meta["num_cameras"])])
        n = meta["num_sweeps"] if sweeps is None else min(sweeps, meta["num_sweeps"])
        swp: List[RadarSweep] = []
        for k in range(n):
            s = read_sweep(sdir / f"radar_{k}.rswp")
            pose = meta["sweep_poses"][k]
            s.ego_pose = tuple(pose) if pose is not None else None
            swp.append(s)
        return SampleBundle(sample_id, int(meta["timestamp_us"]), images, list(self.cameras), swp,
                            self.load_boxes(sample_id), meta["description"])

    def descriptions(self) -> List[Dict[str, str]]:
        return [{"sample_id": sid, "description": self.load_meta(sid)["description"]} for sid in self.sample_ids]

    def subset(self, ids: Sequence[str]) -> List[str]:
        known = set(self.sample_ids)
        return [i for i in ids if i in known]
