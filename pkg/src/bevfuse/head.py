"""Center-heatmap detection head: targets, losses, decoding and detection I/O.

Regression channels (``REG_CHANNELS``) per BEV cell:
``[dx, dy, z, log w, log l, log h, vx, vy, sin yaw, cos yaw]`` where
``dx, dy`` are the sub-cell offsets of the object center in cell units.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import BevGridSpec, Box3D
from .tensor import Tensor, ops
from .tensor.nn import BatchNorm2d, Conv2d, Module

REG_CHANNELS = ("dx", "dy", "z", "log_w", "log_l", "log_h", "vx", "vy", "sin", "cos")
R = len(REG_CHANNELS)
PROB_CLAMP = 1e-6
HEATMAP_BIAS = -2.19  # sigmoid(-2.19) ~ 0.1


@dataclass(frozen=True)
class TargetConfig:
    min_overlap: float = 0.1
    min_radius: int = 1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    heatmap_weight: float = 1.0
    reg_weight: float = 0.25

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass(frozen=True)
class DecodeConfig:
    score_thresh: float = 0.1
    max_dets: int = 100


@dataclass
class Targets:
    heatmap: np.ndarray     # (K, H, W)
    regression: np.ndarray  # (R, H, W)
    mask: np.ndarray        # (H, W) bool, cells carrying a regression target
    centers: List[Tuple[int, int, int]]  # (class, row, col) per kept object
    skipped: int = 0

    @property
    def num_objects(self) -> int:
        return len(self.centers)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def gaussian_radius(height: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest center shift (in cells) keeping IoU >= ``min_overlap`` (CornerNet rule)."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_patch(radius: int) -> np.ndarray:
    """(2r+1)^2 Gaussian with sigma = (2r+1)/6 and exactly 1 at the center."""
    sigma = (2 * radius + 1) / 6.0
    off = np.arange(-radius, radius + 1)
    g = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2 * sigma * sigma))
    g[radius, radius] = 1.0
    return g


def draw_gaussian(channel: np.ndarray, row: int, col: int, radius: int) -> None:
    """Elementwise max of a Gaussian centered on (row, col) into ``channel``."""
    h, w = channel.shape
    g = gaussian_patch(radius)
    top, bottom = min(row, radius), min(h - row, radius + 1)
    left, right = min(col, radius), min(w - col, radius + 1)
    region = channel[row - top:row + bottom, col - left:col + right]
    np.maximum(region, g[radius - top:radius + bottom, radius - left:radius + right], out=region)


def box_radius(box: Box3D, grid: BevGridSpec, cfg: TargetConfig) -> int:
    r = gaussian_radius(box.l / grid.cell, box.w / grid.cell, cfg.min_overlap)
    return max(cfg.min_radius, int(r))


def make_targets(boxes: Sequence[Box3D], grid: BevGridSpec, num_classes: int,
                 cfg: TargetConfig = TargetConfig()) -> Targets:
    """Gaussian heatmaps, regression maps and the regression mask for one frame."""
    h, w = grid.shape
    heat = np.zeros((num_classes, h, w), dtype=np.float32)
    reg = np.zeros((R, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    centers = []
    skipped = 0
    for box in boxes:
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"class_id {box.class_id} outside 0..{num_classes - 1}")
        fx = (box.center[0] - grid.x_min) / grid.cell
        fy = (box.center[1] - grid.y_min) / grid.cell
        rows, cols, inside = grid.cells(box.center[0], box.center[1])
        if not bool(inside):
            skipped += 1
            continue
        r, c = int(rows), int(cols)
        draw_gaussian(heat[box.class_id], r, c, box_radius(box, grid, cfg))
        reg[:, r, c] = [fx - c, fy - r, box.center[2], math.log(box.w), math.log(box.l), math.log(box.h),
                        box.velocity[0], box.velocity[1], math.sin(box.yaw), math.cos(box.yaw)]
        mask[r, c] = True
        centers.append((box.class_id, r, c))
    return Targets(heat, reg, mask, centers, skipped)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def gaussian_focal_loss(p: Tensor, y: np.ndarray, cfg: LossConfig = LossConfig(),
                        num_objects: Optional[int] = None) -> Tensor:
    """Focal loss against Gaussian targets, normalized by the object count.

    Cells with ``y == 1`` contribute ``(1-p)^a log p``; all others
    ``(1-y)^b p^a log(1-p)``. ``p`` is clamped to [1e-6, 1-1e-6]. With no
    objects the sum is divided by 1.
    """
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"prediction {p.shape} and target {y.shape} differ")
    if num_objects is None:
        num_objects = int((y == 1).sum())
    dtype = p.dtype
    pos = (y == 1).astype(dtype)
    neg_w = ((1.0 - y) ** cfg.beta * (y != 1)).astype(dtype)
    pc = ops.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus = 1.0 - pc
    pos_term = ops.power(one_minus, cfg.alpha) * ops.log(pc) * Tensor(pos)
    neg_term = ops.power(pc, cfg.alpha) * ops.log(one_minus) * Tensor(neg_w)
    total = ops.sum(pos_term + neg_term)
    return ops.scale(total, -1.0 / max(num_objects, 1))


def regression_l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray,
                       channel_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Mean absolute error over masked cells and all channels; 0 for an empty mask.

    ``pred``/``target`` are (..., R, H, W) and ``mask`` (..., H, W). Optional
    ``channel_weights`` (R,) scale each channel's error before averaging. The
    subgradient of |0| is taken as 0.
    """
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape[:-3] + pred.shape[-2:] != mask.shape:
        raise ValueError(f"shapes differ: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    channels = pred.shape[-3]
    count = int(mask.sum()) * channels
    m = np.expand_dims(mask, -3).astype(pred.dtype)
    if channel_weights is not None:
        w = np.asarray(channel_weights, dtype=pred.dtype)
        if w.shape != (channels,):
            raise ValueError(f"channel_weights needs shape ({channels},), got {w.shape}")
        m = m * w[:, None, None]
    diff = ops.absolute(pred - Tensor(target.astype(pred.dtype))) * Tensor(m)
    if count == 0:
        return ops.scale(ops.sum(diff), 0.0)
    return ops.scale(ops.sum(diff), 1.0 / count)


# ---------------------------------------------------------------------------
# network head
# ---------------------------------------------------------------------------

@dataclass
class HeadOutput:
    heatmap: Tensor     # (N, K, H, W) probabilities
    regression: Tensor  # (N, R, H, W)


class CenterHead(Module):
    """Shared 3x3 conv-BN-ReLU, then 1x1 heatmap logits and 1x1 regression."""

    def __init__(self, in_ch: int, num_classes: int, hidden: int = 32, rng=None):
        super().__init__()
        self.shared = Conv2d(in_ch, hidden, 3, 1, bias=False, rng=rng)
        self.bn = BatchNorm2d(hidden)
        self.heat = Conv2d(hidden, num_classes, 1, 1, padding=0, rng=rng)
        self.heat.weight.data *= 0.1
        self.heat.bias.data[...] = HEATMAP_BIAS
        self.reg = Conv2d(hidden, R, 1, 1, padding=0, rng=rng)
        self.reg.weight.data *= 0.1

    def forward(self, x: Tensor) -> HeadOutput:
        f = ops.relu(self.bn(self.shared(x)))
        return HeadOutput(ops.sigmoid(self.heat(f)), self.reg(f))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class AttributeLookup:
    """Most frequent ground-truth attribute per (class, moving) bucket."""

    table: Dict[Tuple[int, bool], int] = field(default_factory=dict)
    speed_threshold: float = 0.5

    @classmethod
    def fit(cls, boxes: Iterable[Box3D], speed_threshold: float = 0.5) -> "AttributeLookup":
        counts: Dict[Tuple[int, bool], Counter] = {}
        for b in boxes:
            key = (int(b.class_id), bool(np.hypot(*b.velocity) > speed_threshold))
            counts.setdefault(key, Counter())[int(b.attribute_id)] += 1
        # ties go to the smallest attribute id
        table = {k: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for k, c in counts.items()}
        return cls(table, speed_threshold)

    def __call__(self, class_id: int, velocity) -> int:
        moving = bool(np.hypot(*velocity) > self.speed_threshold)
        if (class_id, moving) in self.table:
            return self.table[(class_id, moving)]
        return self.table.get((class_id, not moving), 0)

    def to_dict(self) -> dict:
        return {"speed_threshold": self.speed_threshold,
                "table": [[k[0], int(k[1]), v] for k, v in sorted(self.table.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeLookup":
        return cls({(int(c), bool(m)): int(v) for c, m, v in d["table"]}, float(d["speed_threshold"]))


def find_peaks(heatmap: np.ndarray, score_thresh: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(class, row, col) of cells equal to their 3x3 max and above the threshold."""
    pooled = maximum_filter(heatmap, size=(1, 3, 3), mode="constant", cval=-np.inf)
    keep = (heatmap == pooled) & (heatmap > score_thresh)
    return np.nonzero(keep)


def decode(heatmap, regression, grid: BevGridSpec, cfg: DecodeConfig = DecodeConfig(),
           attributes: Optional[AttributeLookup] = None) -> List[Box3D]:
    """Boxes from one frame's (K, H, W) heatmap and (R, H, W) regression maps.

    Ordered by descending score (ties by class, row, col).
    """
    hm = np.asarray(heatmap.data if isinstance(heatmap, Tensor) else heatmap, dtype=np.float64)
    reg = np.asarray(regression.data if isinstance(regression, Tensor) else regression, dtype=np.float64)
    ks, rows, cols = find_peaks(hm, cfg.score_thresh)
    scores = hm[ks, rows, cols]
    order = np.lexsort((cols, rows, ks, -scores))[:cfg.max_dets]
    out = []
    for i in order:
        k, r, c = int(ks[i]), int(rows[i]), int(cols[i])
        v = reg[:, r, c]
        x = (c + v[0]) * grid.cell + grid.x_min
        y = (r + v[1]) * grid.cell + grid.y_min
        dims = np.exp(np.clip(v[3:6], -5.0, 5.0))
        vel = v[6:8]
        out.append(Box3D(
            center=[x, y, v[2]], size=dims, yaw=math.atan2(v[8], v[9]), velocity=vel, class_id=k,
            attribute_id=attributes(k, vel) if attributes is not None else 0,
            score=float(min(max(scores[i], 0.0), 1.0)),
        ))
    return out


# ---------------------------------------------------------------------------
# detection sets (JSON lines)
# ---------------------------------------------------------------------------

@dataclass
class DetectionSet:
    """Predicted boxes keyed by sample id."""

    class_names: Tuple[str, ...]
    detections: Dict[str, List[Box3D]] = field(default_factory=dict)

    def add(self, sample_id: str, boxes: Sequence[Box3D]) -> None:
        self.detections.setdefault(sample_id, []).extend(boxes)

    def __len__(self) -> int:
        return sum(len(v) for v in self.detections.values())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sid in sorted(self.detections):
                for box in self.detections[sid]:
                    rec = {"sample_id": sid, "class_name": self.class_names[box.class_id]}
                    rec.update(box.to_dict())
                    fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, path, class_names: Sequence[str]) -> "DetectionSet":
        names = tuple(class_names)
        out = cls(names)
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec["class_name"] not in names:
                    raise ValueError(f"unknown class {rec['class_name']!r}")
                rec["class_id"] = names.index(rec["class_name"])
                box = Box3D.from_dict(rec)
                if box.score is None:
                    raise ValueError("detection without score")
            except (KeyError, ValueError, TypeError) as err:
                raise ValueError(f"{path}:{lineno}: bad detection record ({err})") from err
            out.add(rec["sample_id"], [box])
        return out
