"""End-to-end detector: camera branch, optional radar branch, fusion, BEV encoder, head."""

from __future__ import annotations

import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig
from .data.synthetic import SampleBundle
from .fusion import BevEncoder, FusionConv, fuse
from .geometry import AugmentParams, Box3D, CameraModel, augment3d, warp_bev_indices
from .head import (
    REG_CHANNELS,
    AttributeLookup,
    CenterHead,
    DecodeConfig,
    HeadOutput,
    LossConfig,
    Targets,
    decode,
    gaussian_focal_loss,
    make_targets,
    regression_l1_loss,
)
from .radar import (
    BevFeatureNet,
    BevFeatureNetConfig,
    BlurConfig,
    RadarBackbone,
    SkewConfig,
    build_pillars,
    doppler_skew,
    grid_map_blur,
    radar_grid_map,
)
from .tensor import Tensor, ops
from .tensor.nn import Module, ResidualBackbone
from .view_transform import DepthHead, LssPool, ViewTransformConfig, build_ring_ray, matrixvt_transform

IMAGE_MEAN = 0.45
IMAGE_STD = 0.25
# count, max rcs, min v_d, max v_d
GRID_MAP_SCALE = np.array([1 / 3.0, 1 / 20.0, 1 / 10.0, 1 / 10.0], dtype=np.float32)[:, None, None]
STAGES = ("camera", "radar", "fusion", "head")


def prepare_images(images: np.ndarray, downscale: int = 1, coord_channels: bool = True) -> np.ndarray:
    """(N, H, W, 3) in [0, 1] -> normalized (N, C, H/s, W/s) with optional row/col channels."""
    x = np.asarray(images, dtype=np.float32)
    n, h, w, _ = x.shape
    if downscale > 1:
        s = downscale
        x = x.reshape(n, h // s, s, w // s, s, 3).mean(axis=(2, 4))
        h, w = h // s, w // s
    x = ((x - IMAGE_MEAN) / IMAGE_STD).transpose(0, 3, 1, 2)
    if coord_channels:
        rows = np.broadcast_to(np.linspace(-1, 1, h, dtype=np.float32)[:, None], (h, w))
        cols = np.broadcast_to(np.linspace(-1, 1, w, dtype=np.float32)[None, :], (h, w))
        coords = np.broadcast_to(np.stack([rows, cols]), (n, 2, h, w))
        x = np.concatenate([x, coords], axis=1)
    return np.ascontiguousarray(x, dtype=np.float32)


def bev_coordinates(grid) -> np.ndarray:
    """(2, H, W) cell-center x and y scaled to [-1, 1]."""
    rows, cols = np.meshgrid(np.arange(grid.H), np.arange(grid.W), indexing="ij")
    cx, cy = grid.cell_center(rows, cols)
    half_x = (grid.x_max - grid.x_min) / 2
    half_y = (grid.y_max - grid.y_min) / 2
    return np.stack([cx / half_x, cy / half_y]).astype(np.float32)


class CameraEncoder(Module):
    """Residual image backbone (stride 8) followed by a depth/context head."""

    def __init__(self, cfg: PipelineConfig, rng=None):
        super().__init__()
        c = cfg.camera
        in_ch = 5 if c.coord_channels else 3
        self.backbone = ResidualBackbone(in_ch, c.stem, [(c.width, 1, 2), (2 * c.width, 1, 2)], 2 * c.width,
                                         stem_stride=2, rng=rng)
        self.depth = DepthHead(2 * c.width, c.depth_bins, c.context, rng=rng)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return self.depth(ops.relu(self.backbone(x)))


@dataclass
class Frame:
    """One preprocessed training / inference sample."""

    sample_id: str
    images: np.ndarray                  # (N_i, C, h, w)
    boxes: List[Box3D]
    points: np.ndarray                  # aggregated, after augmentation
    radar: Optional[object] = None      # PillarTensor or (4, H, W) grid map
    targets: Optional[Targets] = None
    bev_warp: Optional[Tuple[np.ndarray, np.ndarray]] = None


class StageTimer:
    def __init__(self):
        self.times: Dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        yield
        self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


@contextmanager
def _null(_name):
    yield


class DetectionModel(Module):
    def __init__(self, cfg: PipelineConfig, cameras: Sequence[CameraModel], class_names: Sequence[str],
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.class_names = tuple(class_names)
        s = cfg.camera.downscale
        self.input_cameras = list(cameras)
        self.cameras = [cam.scaled(1.0 / s) if s > 1 else cam for cam in cameras]
        h_img, w_img = self.cameras[0].height, self.cameras[0].width
        if any((c.height, c.width) != (h_img, w_img) for c in self.cameras):
            raise ValueError("all cameras must share one image size")
        if h_img % 8 or w_img % 8:
            raise ValueError(f"image size {w_img}x{h_img} is not divisible by the encoder stride 8")
        self.feat_hw = (h_img // 8, w_img // 8)
        self.vt_cfg = ViewTransformConfig(cfg.bev_grid, cfg.camera.d_min, cfg.camera.d_max,
                                          cfg.camera.depth_bins, stride=8)
        self.camera = CameraEncoder(cfg, rng)
        if cfg.model.view == "lss":
            self._lss = LssPool(self.cameras, self.vt_cfg, *self.feat_hw)
        else:
            self._ring = build_ring_ray(self.cameras, self.vt_cfg, *self.feat_hw)
        cam_ch = cfg.camera.context
        self.pillar_net = None
        self.radar_backbone = None
        self.fusion = None
        if not cfg.camera_only:
            if cfg.model.radar == "bev_feature_net":
                self.pillar_cfg = BevFeatureNetConfig(cfg.radar_grid, cfg.radar.max_cells, cfg.radar.max_points,
                                                      cfg.radar.channels, cfg.radar.sweeps)
                self.pillar_net = BevFeatureNet(self.pillar_cfg, rng)
                radar_in = cfg.radar.channels
            else:
                radar_in = 4
            self.radar_backbone = RadarBackbone(radar_in, cfg.radar.backbone_width, rng=rng)
            self.fusion = FusionConv(cam_ch, self.radar_backbone.out_channels, rng)
        enc_in = cam_ch + (2 if cfg.model.bev_coords else 0)
        self._bev_coords = bev_coordinates(cfg.bev_grid) if cfg.model.bev_coords else None
        self.encoder = BevEncoder(enc_in, cfg.model.bev_channels, cfg.model.bev_channels, cfg.model.bev_blocks, rng)
        self.head = CenterHead(cfg.model.bev_channels, len(self.class_names), cfg.model.head_hidden, rng)
        self.attributes = AttributeLookup()
        self.loss_cfg = LossConfig(cfg.loss.alpha, cfg.loss.beta, cfg.loss.heatmap_weight, cfg.loss.reg_weight)
        w = np.ones(len(REG_CHANNELS), dtype=np.float32)
        w[[REG_CHANNELS.index("vx"), REG_CHANNELS.index("vy")]] = cfg.loss.velocity_weight
        self.channel_weights = w
        self.decode_cfg = DecodeConfig(cfg.decode.score_thresh, cfg.decode.max_dets)

    # -- preprocessing -------------------------------------------------------------
    def prepare(self, bundle: SampleBundle, rng: Optional[np.random.Generator] = None,
                augment: bool = False, with_targets: bool = True, with_radar: bool = True) -> Frame:
        cfg = self.cfg
        images = prepare_images(bundle.images, cfg.camera.downscale, cfg.camera.coord_channels)
        points = bundle.radar_points(cfg.radar.sweeps)
        boxes = list(bundle.boxes)
        warp = None
        if augment and rng is not None:
            params = AugmentParams(flip_x=bool(rng.random() < cfg.augment.flip_prob),
                                   flip_y=bool(rng.random() < cfg.augment.flip_prob))
            if params.flip_x or params.flip_y:
                res = augment3d(points, boxes, params)
                points, boxes = res.points, res.boxes
                warp = warp_bev_indices(cfg.bev_grid, res.bev_transform)
        frame = Frame(bundle.sample_id, images, boxes, points, bev_warp=warp)
        if with_radar:
            self.attach_radar(frame)
        if with_targets:
            frame.targets = make_targets(boxes, cfg.bev_grid, len(self.class_names))
        return frame

    def attach_radar(self, frame: Frame) -> Frame:
        """Build the radar encoder input from ``frame.points`` (no-op for camera-only)."""
        cfg = self.cfg
        if cfg.camera_only:
            return frame
        pts = frame.points.copy()
        if cfg.radar.skew and len(pts):
            pts[:, 3] = doppler_skew(pts[:, 3], SkewConfig(True))
        if cfg.model.radar == "bev_feature_net":
            seed = (cfg.train.seed, zlib.crc32(frame.sample_id.encode()))
            frame.radar = build_pillars(pts, self.pillar_cfg, np.random.default_rng(seed))
        else:
            gm = grid_map_blur(radar_grid_map(pts, cfg.radar_grid), BlurConfig(cfg.radar.blur))
            frame.radar = gm.data * GRID_MAP_SCALE
        return frame

    # -- forward -----------------------------------------------------------------------
    def camera_bev(self, frames: Sequence[Frame], timer=_null) -> Tensor:
        n_cam = frames[0].images.shape[0]
        with timer("camera"):
            x = Tensor(np.concatenate([f.images for f in frames]))
            depth, context = self.camera(x)
            bevs = []
            for i, f in enumerate(frames):
                sl = slice(i * n_cam, (i + 1) * n_cam)
                ctx, dep = context[sl], depth[sl]
                if self.cfg.model.view == "lss":
                    bev = self._lss(ctx, dep)
                else:
                    bev = matrixvt_transform(ctx, dep, self.cameras, self.vt_cfg, self._ring)
                if f.bev_warp is not None:
                    src, valid = f.bev_warp
                    c = bev.shape[0]
                    flat = bev.reshape(c, -1)[:, src] * Tensor(valid.astype(np.float32)[None, :])
                    bev = flat.reshape(bev.shape)
                bevs.append(bev.reshape((1,) + bev.shape))
            return ops.concat(bevs, axis=0) if len(bevs) > 1 else bevs[0]

    def radar_bev(self, frames: Sequence[Frame], timer=_null) -> Optional[Tensor]:
        if self.cfg.camera_only:
            return None
        with timer("radar"):
            if self.pillar_net is not None:
                x = self.pillar_net([f.radar for f in frames])
            else:
                x = Tensor(np.stack([f.radar for f in frames]).astype(np.float32))
            return self.radar_backbone(x)

    def forward(self, frames: Sequence[Frame], timer=_null) -> HeadOutput:
        cam = self.camera_bev(frames, timer)
        radar = self.radar_bev(frames, timer)
        with timer("fusion"):
            if radar is not None:
                radar_out = self.cfg.radar_grid.downsample(self.cfg.grid.radar_stride)
                bev = fuse(cam, radar, self.cfg.bev_grid, radar_out, self.fusion).features
            else:
                bev = cam
            if self._bev_coords is not None:
                coords = np.broadcast_to(self._bev_coords, (bev.shape[0],) + self._bev_coords.shape)
                bev = ops.concat([bev, Tensor(np.ascontiguousarray(coords))], axis=1)
        with timer("head"):
            return self.head(self.encoder(bev))

    # -- training / inference ------------------------------------------------------------
    def loss(self, out: HeadOutput, frames: Sequence[Frame]) -> Tuple[Tensor, float, float]:
        heat_t = np.stack([f.targets.heatmap for f in frames])
        reg_t = np.stack([f.targets.regression for f in frames])
        mask = np.stack([f.targets.mask for f in frames])
        n_obj = sum(f.targets.num_objects for f in frames)
        heat = gaussian_focal_loss(out.heatmap, heat_t, self.loss_cfg, num_objects=n_obj)
        reg = regression_l1_loss(out.regression, reg_t, mask, self.channel_weights)
        total = ops.scale(heat, self.loss_cfg.heatmap_weight) + ops.scale(reg, self.loss_cfg.reg_weight)
        return total, float(heat.item()), float(reg.item())

    def decode_frames(self, out: HeadOutput, frames: Sequence[Frame]) -> Dict[str, List[Box3D]]:
        res = {}
        for i, f in enumerate(frames):
            res[f.sample_id] = decode(out.heatmap.data[i], out.regression.data[i], self.cfg.bev_grid,
                                      self.decode_cfg, self.attributes)
        return res


def build_model(cfg: PipelineConfig, cameras: Sequence[CameraModel], class_names: Sequence[str],
                seed: int = 0) -> DetectionModel:
    return DetectionModel(cfg, cameras, class_names, seed)
