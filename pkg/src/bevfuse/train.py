"""Training loop, checkpoints with metadata, and dataset-level prediction."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError, PipelineConfig, parse_config
from .data.dataset import Dataset, DatasetError
from .geometry import Box3D, CameraModel
from .head import AttributeLookup, DetectionSet
from .metrics import EvalConfig, MetricsReport, evaluate
from .model import DetectionModel, Frame, build_model
from .tensor import AdamW, no_grad
from .tensor.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "heatmap_loss", "reg_loss", "total")


@dataclass
class EpochLog:
    epoch: int
    heatmap_loss: float
    reg_loss: float
    total: float
    seconds: float = 0.0


@dataclass
class TrainResult:
    model: DetectionModel
    history: List[EpochLog] = field(default_factory=list)
    train_ids: List[str] = field(default_factory=list)


class PreflightError(ConfigError):
    """Configuration and dataset describe incompatible geometry."""


def split_ids(ids: Sequence[str], train_fraction: float) -> tuple:
    """Leading share for training, the rest for evaluation."""
    n = int(round(len(ids) * train_fraction))
    return list(ids[:n]), list(ids[n:])


def preflight(cfg: PipelineConfig, ds: Dataset) -> None:
    """Reject a config whose BEV grid or image geometry does not fit the dataset."""
    gen = ds.generator_config
    if not math.isclose(gen.extent, cfg.grid.extent, abs_tol=1e-9):
        raise PreflightError(
            f"dataset plane is +-{gen.extent} m but the config grid is +-{cfg.grid.extent} m")
    s = cfg.camera.downscale
    for cam in ds.cameras:
        if cam.width % (8 * s) or cam.height % (8 * s):
            raise PreflightError(f"dataset images {cam.width}x{cam.height} not divisible by {8 * s}")
    if len(ds.class_names) < 1:
        raise PreflightError("dataset has no classes")


def _lr_at(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` to 10% of it."""
    if total <= 1:
        return base
    return base * (0.1 + 0.45 * (1 + math.cos(math.pi * step / (total - 1))))


class FrameCache:
    """Prepared frames without augmentation, built once per sample."""

    def __init__(self, model: DetectionModel, ds: Dataset):
        self.model, self.ds = model, ds
        self.key = self.key_for(model.cfg)
        self._frames: Dict[str, Frame] = {}

    @staticmethod
    def key_for(cfg: PipelineConfig) -> tuple:
        """Frames depend only on the image settings, the grid and the sweep count."""
        return cfg.camera, cfg.grid, cfg.radar.sweeps

    def get(self, sid: str) -> Frame:
        if sid not in self._frames:
            self._frames[sid] = self.model.prepare(self.ds.load(sid, self.model.cfg.radar.sweeps), with_radar=False)
        return self._frames[sid]


def train(cfg: PipelineConfig, ds: Dataset, epochs: Optional[int] = None, seed: Optional[int] = None,
          train_ids: Optional[Sequence[str]] = None, loss_csv=None, cache: Optional[FrameCache] = None,
          progress=None) -> TrainResult:
    preflight(cfg, ds)
    epochs = cfg.train.epochs if epochs is None else epochs
    seed = cfg.train.seed if seed is None else seed
    if train_ids is None:
        train_ids, _ = split_ids(ds.sample_ids, cfg.train.train_fraction)
    train_ids = list(train_ids)
    if not train_ids:
        raise DatasetError("no training samples")
    model = build_model(cfg, ds.cameras, ds.class_names, seed=seed)
    model.train()
    opt = AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    rng = np.random.default_rng([seed, 1])
    if cache is None or cache.key != FrameCache.key_for(cfg) or cache.ds is not ds:
        cache = FrameCache(model, ds)
    cache.model = model
    batch = cfg.train.batch
    steps_per_epoch = math.ceil(len(train_ids) / batch)
    total_steps = epochs * steps_per_epoch
    history, step = [], 0
    writer, fh = None, None
    if loss_csv is not None:
        fh = open(loss_csv, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
    try:
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_ids))
            sums = np.zeros(3)
            for b in range(steps_per_epoch):
                ids = [train_ids[i] for i in order[b * batch:(b + 1) * batch]]
                if cfg.augment.enabled:
                    frames = [model.prepare(ds.load(sid, cfg.radar.sweeps), rng=rng, augment=True) for sid in ids]
                else:
                    frames = [model.attach_radar(cache.get(sid)) for sid in ids]
                opt.state.lr = _lr_at(cfg.optim.lr, step, total_steps)
                model.zero_grad()
                out = model(frames)
                loss, heat, reg = model.loss(out, frames)
                loss.backward()
                opt.step()
                if not cfg.augment.enabled:
                    for f in frames:
                        f.radar = None  # rebuilt per step; keeps the cache small
                sums += (heat, reg, float(loss.item()))
                step += 1
            mean = sums / steps_per_epoch
            rec = EpochLog(epoch, float(mean[0]), float(mean[1]), float(mean[2]), time.perf_counter() - t0)
            history.append(rec)
            log.info("epoch %d: heatmap %.4f reg %.4f total %.4f (%.1fs)", epoch, *mean, rec.seconds)
            if writer is not None:
                writer.writerow([epoch, f"{rec.heatmap_loss:.6f}", f"{rec.reg_loss:.6f}", f"{rec.total:.6f}"])
                fh.flush()
            if progress is not None:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
    model.attributes = AttributeLookup.fit(b for sid in train_ids for b in ds.load_boxes(sid))
    model.eval()
    return TrainResult(model, history, train_ids)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def meta_path(ckpt) -> Path:
    p = Path(ckpt)
    return p.with_name(p.name + ".json")


def save_model(model: DetectionModel, path, extra: Optional[dict] = None) -> None:
    """Weights in the binary checkpoint, everything else in ``<path>.json``."""
    save_checkpoint(model.state_dict(), path)
    meta = {
        "config": model.cfg.to_text(),
        "class_names": list(model.class_names),
        "cameras": [c.to_dict() for c in model.input_cameras],
        "attributes": model.attributes.to_dict(),
    }
    meta.update(extra or {})
    meta_path(path).write_text(json.dumps(meta, indent=1))


def load_model(path) -> DetectionModel:
    mp = meta_path(path)
    if not mp.exists():
        raise CheckpointError(f"missing checkpoint metadata {mp}")
    meta = json.loads(mp.read_text())
    cfg = parse_config(meta["config"], str(mp))
    cams = [CameraModel.from_dict(c) for c in meta["cameras"]]
    model = build_model(cfg, cams, meta["class_names"])
    model.load_state_dict(load_checkpoint(path))
    model.attributes = AttributeLookup.from_dict(meta["attributes"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------

def predict(model: DetectionModel, ds: Dataset, ids: Sequence[str], batch: int = 8,
            cache: Optional[FrameCache] = None) -> DetectionSet:
    model.eval()
    dets = DetectionSet(model.class_names)
    ids = list(ids)
    with no_grad():
        for i in range(0, len(ids), batch):
            chunk = ids[i:i + batch]
            if cache is not None:
                frames = [model.attach_radar(cache.get(sid)) for sid in chunk]
            else:
                frames = [model.prepare(ds.load(sid, model.cfg.radar.sweeps), with_targets=False) for sid in chunk]
            out = model(frames)
            for sid, boxes in model.decode_frames(out, frames).items():
                dets.add(sid, boxes)
            if cache is not None:
                for f in frames:
                    f.radar = None
    return dets


def ground_truth(ds: Dataset, ids: Sequence[str]) -> Dict[str, List[Box3D]]:
    return {sid: ds.load_boxes(sid) for sid in ids}


def evaluate_predictions(ds: Dataset, dets: DetectionSet, ids: Sequence[str]) -> MetricsReport:
    gts = ground_truth(ds, ids)
    preds = {sid: dets.detections.get(sid, []) for sid in ids}
    return evaluate(gts, preds, EvalConfig(class_names=tuple(ds.class_names)))
