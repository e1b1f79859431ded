"""Camera features to BEV features.

Two routes produce the same kind of output, a (C, H_bev, W_bev) map:

* lift-splat: every (camera, pixel, depth bin) becomes a weighted point in
  the ego frame (``lift``) which is summed into its BEV cell (``splat``).
  ``LssPool`` is the differentiable, batched form used in training.
* MatrixVT: features and depth are averaged over image rows into "prime"
  matrices, then mapped to BEV with a sparse ring (depth bin -> cell, per
  image column) operator and a ray (image column) contraction.

With a single image row both routes agree exactly; with more rows MatrixVT
equals lift-splat applied to the row-averaged inputs, placed on the mean
row's rays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .geometry import BevGridSpec, CameraModel
from .tensor import Tensor, ops
from .tensor.nn import Conv2d, Module


@dataclass(frozen=True)
class ViewTransformConfig:
    grid: BevGridSpec
    d_min: float = 1.0
    d_max: float = 60.0
    num_bins: int = 59
    stride: int = 8

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError("need at least one depth bin")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("depth range must satisfy 0 < d_min < d_max")

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.num_bins + 1)

    @property
    def bin_centers(self) -> np.ndarray:
        e = self.bin_edges
        return 0.5 * (e[:-1] + e[1:])


def pixel_centers(h: int, w: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image coordinates of feature-map cell centers (pixel centers at integers)."""
    u = (np.arange(w) + 0.5) * stride - 0.5
    v = (np.arange(h) + 0.5) * stride - 0.5
    return u, v


# ---------------------------------------------------------------------------
# naive lift + splat (reference path)
# ---------------------------------------------------------------------------

@dataclass
class LiftedPoints:
    positions: np.ndarray  # (M, 3) ego frame
    features: np.ndarray   # (M, C) feature * depth probability


def lift(features: np.ndarray, depth: np.ndarray, cameras: Sequence[CameraModel], cfg: ViewTransformConfig,
         rows: Optional[np.ndarray] = None) -> LiftedPoints:
    """Outer product of features and depth probabilities, placed in 3D.

    ``features`` is (N, C, h, w) and ``depth`` (N, D, h, w). Record order is
    (camera, bin, row, col). ``rows`` overrides the image row of each
    feature row (used for vertically compressed inputs).
    """
    features = np.asarray(features, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    n, c, h, w = features.shape
    if depth.shape != (n, cfg.num_bins, h, w):
        raise ValueError(f"depth shape {depth.shape} does not match features {features.shape} with D={cfg.num_bins}")
    if len(cameras) != n:
        raise ValueError(f"{len(cameras)} cameras for {n} feature maps")
    u, v = pixel_centers(h, w, cfg.stride)
    if rows is not None:
        v = np.asarray(rows, dtype=np.float64)
    dd, vv, uu = np.meshgrid(cfg.bin_centers, v, u, indexing="ij")
    positions, feats = [], []
    for i, cam in enumerate(cameras):
        positions.append(cam.unproject(uu, vv, dd).reshape(-1, 3))
        # (D, h, w, C)
        weighted = depth[i][:, :, :, None] * np.transpose(features[i], (1, 2, 0))[None]
        feats.append(weighted.reshape(-1, c))
    return LiftedPoints(np.concatenate(positions), np.concatenate(feats))


def splat(records: LiftedPoints, grid: BevGridSpec, return_dropped: bool = False):
    """Sum record features into BEV cells in record order; drop out-of-grid records."""
    idx = grid.flat_index(records.positions[:, 0], records.positions[:, 1])
    keep = idx >= 0
    c = records.features.shape[1]
    out = np.zeros((grid.H * grid.W, c))
    np.add.at(out, idx[keep], records.features[keep])
    bev = out.T.reshape(c, grid.H, grid.W)
    if return_dropped:
        return bev, int((~keep).sum())
    return bev


# ---------------------------------------------------------------------------
# differentiable lift-splat pooling
# ---------------------------------------------------------------------------

def _cell_table(cameras: Sequence[CameraModel], cfg: ViewTransformConfig, h: int, w: int,
                rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Flat BEV cell of every (camera, bin, row, col) lifted point, -1 if outside."""
    u, v = pixel_centers(h, w, cfg.stride)
    if rows is not None:
        v = np.asarray(rows, dtype=np.float64)
    dd, vv, uu = np.meshgrid(cfg.bin_centers, v, u, indexing="ij")
    tables = []
    for cam in cameras:
        p = cam.unproject(uu, vv, dd)
        tables.append(cfg.grid.flat_index(p[..., 0], p[..., 1]))
    return np.stack(tables)  # (N, D, h', w)


def lss_pool(features: Tensor, depth: Tensor, cells: np.ndarray, grid: BevGridSpec) -> Tensor:
    """BEV sum of outer(features, depth) via a cell-by-pixel depth-mass matrix.

    ``features`` (N, C, h, w), ``depth`` (N, D, h, w), ``cells`` (N, D, h, w)
    of flat indices. Computes ``Z[cell, pixel] = sum_d depth`` over bins
    landing in ``cell`` and returns ``features @ Z^T`` as (C, H, W). The
    accumulation uses ``bincount`` in record order, which is deterministic.
    """
    n, c, h, w = features.shape
    d = depth.shape[1]
    hw = grid.H * grid.W
    p = n * h * w
    pix = np.broadcast_to(
        (np.arange(n)[:, None, None, None] * h * w + np.arange(h * w).reshape(1, 1, h, w)), (n, d, h, w)
    ).ravel()
    cell = cells.ravel()
    keep = cell >= 0
    flat = cell[keep] * p + pix[keep]
    dep = depth.data.ravel()[keep]
    z = np.bincount(flat, weights=dep, minlength=hw * p).reshape(hw, p).astype(features.dtype)
    f2 = np.ascontiguousarray(features.data.transpose(1, 0, 2, 3)).reshape(c, p)
    out = (f2 @ z.T).reshape(c, grid.H, grid.W)

    def backward(g):
        g2 = g.reshape(c, hw)
        gf = gd = None
        if features.requires_grad:
            gf = np.ascontiguousarray((g2 @ z).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        if depth.requires_grad:
            gz = g2.T @ f2  # (hw, p)
            gd_flat = np.zeros(cell.size, dtype=depth.dtype)
            gd_flat[keep] = gz.ravel()[flat]
            gd = gd_flat.reshape(depth.shape)
        return gf, gd

    return Tensor.from_op(out, (features, depth), backward)


class LssPool:
    """Precomputed geometry for the batched lift-splat path."""

    def __init__(self, cameras: Sequence[CameraModel], cfg: ViewTransformConfig, h: int, w: int):
        self.cfg = cfg
        self.cells = _cell_table(cameras, cfg, h, w)

    def __call__(self, features: Tensor, depth: Tensor) -> Tensor:
        return lss_pool(features, depth, self.cells, self.cfg.grid)


# ---------------------------------------------------------------------------
# MatrixVT
# ---------------------------------------------------------------------------

@dataclass
class RingRayOperator:
    """Per-camera sparse ring matrix ``(H*W, D*w)``: column ``d*w + j`` has a
    single one at the cell hit by ray ``j`` at bin ``d`` (empty if outside)."""

    ring: List[sp.csr_matrix]
    table: np.ndarray          # (N, D, w) flat cell or -1
    ref_row: float             # image row the compressed rays pass through
    out_of_grid: int = 0


def build_ring_ray(cameras: Sequence[CameraModel], cfg: ViewTransformConfig, h: int, w: int) -> RingRayOperator:
    _, v = pixel_centers(h, w, cfg.stride)
    ref = float(v.mean())
    table = _cell_table(cameras, cfg, 1, w, rows=np.array([ref]))[:, :, 0, :]  # (N, D, w)
    hw = cfg.grid.H * cfg.grid.W
    d = cfg.num_bins
    mats = []
    for t in table:
        flat = t.ravel()  # index d * w + j
        cols = np.nonzero(flat >= 0)[0]
        mats.append(sp.csr_matrix((np.ones(cols.size), (flat[cols], cols)), shape=(hw, d * w)))
    return RingRayOperator(mats, table, ref, int((table < 0).sum()))


def compress_vertical(x: Tensor) -> Tensor:
    """Prime matrix: mean over image rows, (N, C, h, w) -> (N, C, w)."""
    return ops.mean(x, axis=2)


def _matrixvt_camera(f_prime: Tensor, d_prime: Tensor, ring: sp.csr_matrix, table: np.ndarray,
                     grid: BevGridSpec) -> Tensor:
    c, w = f_prime.shape
    d = d_prime.shape[0]
    hw = grid.H * grid.W
    # ray selector: block (d*w + j, j) carries prime depth D'[d, j]
    jj = np.tile(np.arange(w), d)
    sel = sp.csr_matrix((d_prime.data.ravel().astype(np.float64), (np.arange(d * w), jj)), shape=(d * w, w))
    z = np.asarray((ring @ sel).todense(), dtype=f_prime.dtype)   # (hw, w) depth mass per cell and ray
    out = (f_prime.data @ z.T).reshape(c, grid.H, grid.W)
    flat = table.ravel()
    valid = flat >= 0

    def backward(g):
        g2 = g.reshape(c, hw)
        gf = g2 @ z if f_prime.requires_grad else None
        gd = None
        if d_prime.requires_grad:
            gz = g2.T @ f_prime.data  # (hw, w)
            gd_flat = np.zeros(d * w, dtype=d_prime.dtype)
            gd_flat[valid] = gz[flat[valid], jj[valid]]
            gd = gd_flat.reshape(d, w)
        return gf, gd

    return Tensor.from_op(out, (f_prime, d_prime), backward)


def matrixvt_transform(features: Tensor, depth: Tensor, cameras: Sequence[CameraModel], cfg: ViewTransformConfig,
                       operator: Optional[RingRayOperator] = None) -> Tensor:
    """MatrixVT view transform for one sample; cameras are summed on the BEV plane."""
    features, depth = _as_t(features), _as_t(depth)
    n, c, h, w = features.shape
    if depth.shape != (n, cfg.num_bins, h, w):
        raise ValueError(f"depth shape {depth.shape} does not match features {features.shape} with D={cfg.num_bins}")
    if len(cameras) != n:
        raise ValueError(f"{len(cameras)} cameras for {n} feature maps")
    op = operator if operator is not None else build_ring_ray(cameras, cfg, h, w)
    if op.table.shape != (n, cfg.num_bins, w):
        raise ValueError("ring/ray operator was built for a different geometry")
    fp = compress_vertical(features)
    dp = compress_vertical(depth)
    out = None
    for i in range(n):
        bev = _matrixvt_camera(fp[i], dp[i], op.ring[i], op.table[i], cfg.grid)
        out = bev if out is None else out + bev
    return out


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def compressed_reference(features, depth, cameras, cfg: ViewTransformConfig) -> np.ndarray:
    """Lift-splat on row-averaged inputs placed on the mean row: the MatrixVT oracle."""
    features = np.asarray(features, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    h = features.shape[2]
    _, v = pixel_centers(h, features.shape[3], cfg.stride)
    fc = features.mean(axis=2, keepdims=True)
    dc = depth.mean(axis=2, keepdims=True)
    return splat(lift(fc, dc, cameras, cfg, rows=np.array([v.mean()])), cfg.grid)


# ---------------------------------------------------------------------------
# depth head
# ---------------------------------------------------------------------------

class DepthHead(Module):
    """1x1 conv to D depth logits (softmax over D) and a 1x1 context conv."""

    def __init__(self, in_ch: int, num_bins: int, context_ch: int, rng=None):
        super().__init__()
        self.depth_conv = Conv2d(in_ch, num_bins, 1, 1, padding=0, rng=rng)
        self.context_conv = Conv2d(in_ch, context_ch, 1, 1, padding=0, rng=rng)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        depth = ops.softmax(self.depth_conv(x), axis=1)
        return depth, self.context_conv(x)


def depth_head(features: Tensor, params: DepthHead) -> Tensor:
    """Depth distribution (N, D, h, w), softmax-normalized over D."""
    return ops.softmax(params.depth_conv(features), axis=1)
