"""Radar BEV encoders: sweep aggregation, RadarGridMap, BEVFeatureNet and the
residual radar backbone.

Aggregated radar points are float arrays with columns
``[x, y, rcs, v_d, t_s]`` (meters, dBsm, m/s, seconds).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .geometry import BevGridSpec
from .tensor import Tensor, ops
from .tensor.nn import BatchNorm2d, Conv2d, Module, ResidualBackbone

log = logging.getLogger(__name__)

POINT_COLUMNS = ("x", "y", "rcs", "v_d", "t_s")
FEATURE_NAMES = ("x", "y", "rcs", "v_d", "t_s", "x_c", "y_c", "x_p", "y_p")
NUM_FEATURES = len(FEATURE_NAMES)


class RadarPoint(NamedTuple):
    x: float
    y: float
    rcs: float
    v_d: float
    t_s: float = 0.0


@dataclass
class RadarSweep:
    """One radar cycle. ``points`` has columns [x, y, rcs, v_d] in the ego
    frame at ``timestamp_us``; ``ego_pose`` is (x, y, yaw) in a world frame."""

    timestamp_us: int
    points: np.ndarray
    ego_pose: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.points)


# +1: receding targets positive, approaching negative (range-rate convention)
DOPPLER_SIGN = 1.0


def radial_velocity(x, y, vx, vy, sensor_xy=(0.0, 0.0)):
    """Component of (vx, vy) along the bearing from the sensor, times ``DOPPLER_SIGN``."""
    dx = np.asarray(x, dtype=np.float64) - sensor_xy[0]
    dy = np.asarray(y, dtype=np.float64) - sensor_xy[1]
    r = np.hypot(dx, dy)
    safe = np.where(r > 0, r, 1.0)
    return DOPPLER_SIGN * np.where(r > 0, (dx * vx + dy * vy) / safe, 0.0)


def _pose_matrix(pose) -> np.ndarray:
    x, y, yaw = pose if pose is not None else (0.0, 0.0, 0.0)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def aggregate_sweeps(sweeps: Sequence[RadarSweep], count: int) -> np.ndarray:
    """Stack the ``count`` newest sweeps into the latest ego frame.

    ``sweeps`` must be ordered newest first. Each point's position is moved
    through the world frame using the sweeps' ego poses; ``t_s`` is the age
    relative to the newest sweep.
    """
    if not sweeps:
        raise ValueError("aggregate_sweeps needs at least one sweep")
    if count < 1:
        raise ValueError("sweep count must be >= 1")
    latest = sweeps[0]
    to_latest = np.linalg.inv(_pose_matrix(latest.ego_pose))
    out = []
    for sweep in sweeps[:count]:
        if sweep.timestamp_us > latest.timestamp_us:
            raise ValueError("sweeps must be ordered newest first")
        pts = sweep.points.astype(np.float64)
        t = to_latest @ _pose_matrix(sweep.ego_pose)
        xy = pts[:, :2] @ t[:2, :2].T + t[:2, 2]
        age = np.full(len(pts), (latest.timestamp_us - sweep.timestamp_us) * 1e-6)
        out.append(np.column_stack([xy, pts[:, 2:4], age]))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 5))


# ---------------------------------------------------------------------------
# RadarGridMap
# ---------------------------------------------------------------------------

def radar_grid_map(points: np.ndarray, grid: BevGridSpec) -> Tensor:
    """Hand-crafted 4-channel grid: count, max RCS, min v_d, max v_d."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = np.zeros((0, 5))
    h, w = grid.shape
    out = np.zeros((4, h * w), dtype=np.float32)
    if len(pts):
        idx = grid.flat_index(pts[:, 0], pts[:, 1])
        keep = idx >= 0
        idx, rcs, vd = idx[keep], pts[keep, 2], pts[keep, 3]
        if idx.size:
            count = np.bincount(idx, minlength=h * w)
            occupied = count > 0
            max_rcs = np.full(h * w, -np.inf)
            min_vd = np.full(h * w, np.inf)
            max_vd = np.full(h * w, -np.inf)
            np.maximum.at(max_rcs, idx, rcs)
            np.minimum.at(min_vd, idx, vd)
            np.maximum.at(max_vd, idx, vd)
            out[0] = count
            out[1, occupied] = max_rcs[occupied]
            out[2, occupied] = min_vd[occupied]
            out[3, occupied] = max_vd[occupied]
    return Tensor(out.reshape(4, h, w))


# 3x3 spreading weights; centre unused
BLUR_KERNEL = np.array([[0.25, 0.5, 0.25], [0.5, 0.0, 0.5], [0.25, 0.5, 0.25]])


@dataclass(frozen=True)
class BlurConfig:
    enabled: bool = False
    count_ref: float = 3.0  # a source with this many detections spreads at full kernel weight


def grid_map_blur(grid_map: Tensor, cfg: BlurConfig) -> Tensor:
    """Spread channels 1-3 of occupied cells into empty neighbours.

    An empty cell receives ``sum_s K[offset] * min(1, n_s / count_ref) * v_s``
    over its occupied 8-neighbours ``s``; occupied cells and the count
    channel are left as they are.
    """
    if not cfg.enabled:
        return grid_map
    data = grid_map.data
    count = data[0]
    h, w = count.shape
    weight = np.minimum(1.0, count / cfg.count_ref) * (count > 0)
    spread = np.zeros_like(data[1:], dtype=np.float64)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            k = BLUR_KERNEL[di + 1, dj + 1]
            if k == 0:
                continue
            src = np.zeros((3, h + 2, w + 2))
            src[:, 1:h + 1, 1:w + 1] = data[1:] * (k * weight)
            # neighbour (i+di, j+dj) sends to (i, j)
            spread += src[:, 1 + di:h + 1 + di, 1 + dj:w + 1 + dj]
    out = data.copy()
    empty = count == 0
    out[1:, empty] = spread[:, empty].astype(data.dtype)
    return Tensor(out)


@dataclass(frozen=True)
class SkewConfig:
    enabled: bool = False
    gamma: float = 0.5


def doppler_skew(v_d, cfg: SkewConfig):
    """Odd monotone map ``sign(v) * ((1 + |v|)**gamma - 1)``; identity if disabled."""
    if not cfg.enabled:
        return v_d
    v = np.asarray(v_d, dtype=np.float64)
    out = np.sign(v) * ((1.0 + np.abs(v)) ** cfg.gamma - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def doppler_unskew(s, cfg: SkewConfig):
    if not cfg.enabled:
        return s
    s = np.asarray(s, dtype=np.float64)
    out = np.sign(s) * ((1.0 + np.abs(s)) ** (1.0 / cfg.gamma) - 1.0)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# BEVFeatureNet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BevFeatureNetConfig:
    grid: BevGridSpec
    max_cells: int = 2000       # B
    max_points: int = 10        # N_p
    channels: int = 32          # C
    sweeps: int = 5

    def __post_init__(self):
        if self.max_cells <= 0 or self.max_points <= 0 or self.channels <= 0:
            raise ValueError("B, N_p and C must be positive")


@dataclass
class PillarTensor:
    """Stage-1 output: dense (F, B, N_p) features and the cell each slot maps to."""

    features: np.ndarray   # (F, B, N_p)
    cells: np.ndarray      # (n_used,) flat cell index of slots 0..n_used-1
    dropped_cells: int = 0
    sampled_cells: int = 0


def build_pillars(points: np.ndarray, cfg: BevFeatureNetConfig,
                  rng: Optional[np.random.Generator] = None) -> PillarTensor:
    """Decorate points with the 9 features and pack them into (F, B, N_p).

    Points inside a cell are put in a canonical (lexicographic) order first,
    so the packed tensor does not depend on input order. Cells beyond B and
    points beyond N_p are randomly subsampled with ``rng``.
    """
    grid = cfg.grid
    b, n_p = cfg.max_cells, cfg.max_points
    feats = np.zeros((NUM_FEATURES, b, n_p), dtype=np.float32)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    idx = grid.flat_index(pts[:, 0], pts[:, 1]) if len(pts) else np.zeros(0, dtype=np.int64)
    keep = idx >= 0
    pts, idx = pts[keep], idx[keep]
    if not len(pts):
        return PillarTensor(feats, np.zeros(0, dtype=np.int64))
    rng = rng if rng is not None else np.random.default_rng(0)

    order = np.lexsort((pts[:, 4], pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], idx))
    pts, idx = pts[order], idx[order]
    cells, inverse, counts = np.unique(idx, return_inverse=True, return_counts=True)

    dropped = 0
    slot_of_cell = np.arange(len(cells))
    if len(cells) > b:
        dropped = len(cells) - b
        chosen = np.sort(rng.choice(len(cells), size=b, replace=False))
        slot_of_cell = np.full(len(cells), -1)
        slot_of_cell[chosen] = np.arange(b)
        log.info("BEVFeatureNet: %d non-empty cells exceed B=%d; sampled %d", len(cells), b, b)
        cells = cells[chosen]
    slot = slot_of_cell[inverse]
    keep = slot >= 0
    pts, slot = pts[keep], slot[keep]
    canon = np.arange(len(pts))

    counts = np.bincount(slot, minlength=len(cells))
    over = counts > n_p
    sampled = int(over.sum())
    if sampled:
        # random keys only matter inside overflowing cells; elsewhere keep canonical order
        key = np.where(over[slot], rng.random(len(pts)), canon.astype(np.float64))
        order = np.lexsort((key, slot))
        first = np.searchsorted(slot[order], np.arange(len(cells)))
        rank = np.empty(len(pts), dtype=np.int64)
        rank[order] = np.arange(len(pts)) - first[slot[order]]
        keep = rank < n_p
        pts, slot, canon = pts[keep], slot[keep], canon[keep]
        log.info("BEVFeatureNet: %d cells exceeded N_p=%d points", sampled, n_p)
    first = np.searchsorted(slot, np.arange(len(cells)))
    rank = np.arange(len(pts)) - first[slot]

    kept = np.bincount(slot, minlength=len(cells)).astype(np.float64)
    mean_x = np.bincount(slot, weights=pts[:, 0], minlength=len(cells)) / kept
    mean_y = np.bincount(slot, weights=pts[:, 1], minlength=len(cells)) / kept
    rows, cols = np.divmod(cells, grid.W)
    cx, cy = grid.cell_center(rows, cols)
    feats[0:5, slot, rank] = pts[:, :5].T
    feats[5, slot, rank] = pts[:, 0] - mean_x[slot]
    feats[6, slot, rank] = pts[:, 1] - mean_y[slot]
    feats[7, slot, rank] = pts[:, 0] - cx[slot]
    feats[8, slot, rank] = pts[:, 1] - cy[slot]
    return PillarTensor(feats, cells.astype(np.int64), dropped, sampled)


class BevFeatureNet(Module):
    """Simplified PointNet over radar pillars: 1x1 conv, BatchNorm, ReLU, max
    over points, then scatter back to the BEV grid."""

    def __init__(self, cfg: BevFeatureNetConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.conv = Conv2d(NUM_FEATURES, cfg.channels, 1, 1, padding=0, bias=False, rng=rng)
        self.bn = BatchNorm2d(cfg.channels)

    def forward(self, pillars: Sequence[PillarTensor]) -> Tensor:
        """(N, C, H, W) BEV features for a batch of packed pillar tensors.

        Padding slots take part in the batch statistics.
        """
        grid = self.cfg.grid
        n = len(pillars)
        x = Tensor(np.stack([p.features for p in pillars]))        # (N, F, B, N_p)
        y = ops.relu(self.bn(self.conv(x)))                          # (N, C, B, N_p)
        pooled, _ = ops.max_over_axis(y, axis=3)                     # (N, C, B)
        c = self.cfg.channels
        hw = grid.H * grid.W
        rows, targets = [], []
        b = self.cfg.max_cells
        for i, p in enumerate(pillars):
            k = len(p.cells)
            rows.append(i * b + np.arange(k))
            targets.append(i * hw + p.cells)
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        targets = np.concatenate(targets) if targets else np.zeros(0, dtype=np.int64)
        flat = ops.transpose(pooled, (0, 2, 1)).reshape(n * b, c)    # slot-major
        picked = flat[rows]
        bev = ops.scatter_rows(picked, targets, n * hw)              # (N*HW, C)
        return ops.transpose(bev.reshape(n, grid.H, grid.W, c), (0, 3, 1, 2))


def bev_feature_net(points: np.ndarray, cfg: BevFeatureNetConfig, params: BevFeatureNet,
                    seed: int = 0) -> Tensor:
    """Single-sample convenience wrapper returning (C, H, W)."""
    pillars = build_pillars(points, cfg, np.random.default_rng(seed))
    return params([pillars]).reshape(cfg.channels, cfg.grid.H, cfg.grid.W)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def radar_backbone_layout(channels: int) -> List[Tuple[int, int, int]]:
    """Stage layout with two downsampling stages, each doubling the width."""
    return [(channels, 1, 1), (2 * channels, 3, 2), (4 * channels, 3, 2)]


class RadarBackbone(Module):
    """Generalized residual backbone, 16 conv layers, output stride 4."""

    def __init__(self, in_channels: int, channels: int, out_channels: Optional[int] = None, rng=None):
        super().__init__()
        self.net = ResidualBackbone(in_channels, channels, radar_backbone_layout(channels),
                                    out_channels or 4 * channels, stem_stride=1, rng=rng)
        self.out_channels = out_channels or 4 * channels

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"radar backbone needs spatial dims divisible by 4, got {h}x{w}")
        return self.net(x)


def radar_backbone(bev_in: Tensor, params: RadarBackbone) -> Tensor:
    return params(bev_in)
