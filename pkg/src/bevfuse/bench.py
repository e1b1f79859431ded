"""Per-stage inference timing of the fusion model against its camera-only twin."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .data.dataset import Dataset
from .model import STAGES, DetectionModel, StageTimer, build_model
from .tensor import no_grad


@dataclass
class StageStats:
    median_ms: float
    p90_ms: float


@dataclass
class BenchReport:
    frames: int
    config: Dict[str, object]
    stages: Dict[str, StageStats]                 # fusion model
    total: StageStats                             # fusion model, per frame
    camera_only_total: Optional[StageStats]
    radar_overhead: Optional[float]               # median total fusion / camera-only - 1
    radar_share: float                            # (radar + fusion) / total, fusion model
    raw_ms: Dict[str, List[float]] = field(default_factory=dict, repr=False)

    def to_dict(self, include_raw: bool = False) -> dict:
        d = asdict(self)
        if not include_raw:
            d.pop("raw_ms")
        return d

    def write_json(self, path, include_raw: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(include_raw), fh, indent=2)

    def table(self) -> str:
        lines = [f"{'stage':<10}{'median ms':>12}{'p90 ms':>10}"]
        for name, s in self.stages.items():
            lines.append(f"{name:<10}{s.median_ms:>12.2f}{s.p90_ms:>10.2f}")
        lines.append(f"{'total':<10}{self.total.median_ms:>12.2f}{self.total.p90_ms:>10.2f}")
        if self.camera_only_total is not None:
            lines.append(f"{'cam-only':<10}{self.camera_only_total.median_ms:>12.2f}"
                         f"{self.camera_only_total.p90_ms:>10.2f}")
            lines.append(f"radar overhead: {100 * self.radar_overhead:+.1f}% over camera-only (median)")
        return "\n".join(lines)


def _stats(ms: Sequence[float]) -> StageStats:
    a = np.asarray(ms, dtype=np.float64)
    return StageStats(float(np.median(a)), float(np.percentile(a, 90)))


def time_frame(model: DetectionModel, bundle) -> Dict[str, float]:
    """Stage times in ms for one batch-1 inference.

    Camera: image preprocessing, encoder and view transform. Radar: point
    encoding, pillar network and backbone. Head: BEV encoder, head and decoding.
    """
    timer = StageTimer()
    t0 = time.perf_counter()
    with no_grad():
        with timer("camera"):
            frame = model.prepare(bundle, with_radar=False, with_targets=False)
        if not model.cfg.camera_only:
            with timer("radar"):
                model.attach_radar(frame)
        res = model([frame], timer)
        with timer("head"):
            model.decode_frames(res, [frame])
    total = time.perf_counter() - t0
    out = {k: 1000.0 * timer.times.get(k, 0.0) for k in STAGES}
    out["total"] = 1000.0 * total
    return out


def time_frames(models: Sequence[DetectionModel], bundles, warmup: int = 3) -> List[Dict[str, List[float]]]:
    """Interleaved timing: every frame runs through each model in turn."""
    for m in models:
        m.eval()
    out = [{k: [] for k in STAGES + ("total",)} for _ in models]
    for i, b in enumerate(bundles):
        for m, rec in zip(models, out):
            t = time_frame(m, b)
            if i >= warmup:
                for k, v in t.items():
                    rec[k].append(v)
    return out


def run_bench(cfg: PipelineConfig, ds: Dataset, frames: Optional[int] = None, compare_camera_only: bool = True,
              seed: int = 0) -> BenchReport:
    """Time ``frames`` samples (cycling through the dataset when it is smaller)."""
    n = frames or cfg.bench.frames
    warm = cfg.bench.warmup
    ids = [ds.sample_ids[i % len(ds)] for i in range(n + warm)]
    loaded = {sid: ds.load(sid, cfg.radar.sweeps) for sid in dict.fromkeys(ids)}
    bundles = [loaded[sid] for sid in ids]
    models = [build_model(cfg, ds.cameras, ds.class_names, seed=seed)]
    compare = compare_camera_only and not cfg.camera_only
    if compare:
        cam_cfg = replace(cfg, model=replace(cfg.model, radar="none"))
        models.append(build_model(cam_cfg, ds.cameras, ds.class_names, seed=seed))
    timings = time_frames(models, bundles, warm)
    fused = timings[0]
    cam_total = None
    overhead = None
    if compare:
        cam_total = _stats(timings[1]["total"])
        overhead = _stats(fused["total"]).median_ms / cam_total.median_ms - 1.0
    totals = np.asarray(fused["total"])
    share = float(np.median((np.asarray(fused["radar"]) + np.asarray(fused["fusion"])) / totals))
    summary = {
        "radar": cfg.model.radar, "view": cfg.model.view,
        "B": cfg.radar.max_cells, "N_p": cfg.radar.max_points, "C": cfg.radar.channels,
        "image": [ds.cameras[0].width // cfg.camera.downscale, ds.cameras[0].height // cfg.camera.downscale],
        "bev": list(cfg.bev_grid.shape), "radar_grid": list(cfg.radar_grid.shape),
    }
    return BenchReport(len(totals), summary, {k: _stats(fused[k]) for k in STAGES}, _stats(fused["total"]),
                       cam_total, overhead, share, fused)
