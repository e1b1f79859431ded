"""Radar/camera BEV fusion and the shared BEV encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import BevGridSpec
from .tensor import Tensor, ops
from .tensor.nn import Conv2d, Module, ResidualBackbone


class GridMismatchError(ValueError):
    """Radar and camera BEV maps do not share one grid."""


@dataclass
class FusedBev:
    features: Tensor                      # (C_cam, H, W) or (N, C_cam, H, W)
    provenance: Dict[str, Tuple[int, ...]] = field(default_factory=dict)


class FusionConv(Module):
    """Channel concat followed by a 1x1 conv back to the camera width.

    Initialized as a pass-through of the camera channels with radar weights
    at zero, so an untrained fusion model behaves like camera-only.
    """

    def __init__(self, cam_channels: int, radar_channels: int, rng=None):
        super().__init__()
        self.cam_channels = cam_channels
        self.radar_channels = radar_channels
        self.conv = Conv2d(cam_channels + radar_channels, cam_channels, 1, 1, padding=0, rng=rng)
        w = np.zeros((cam_channels, cam_channels + radar_channels, 1, 1), dtype=np.float32)
        w[np.arange(cam_channels), np.arange(cam_channels), 0, 0] = 1.0
        self.conv.weight.data[...] = w
        self.conv.bias.data[...] = 0.0

    def forward(self, cam: Tensor, radar: Tensor) -> Tensor:
        return self.conv(ops.concat([cam, radar], axis=1))


def check_grids(cam_grid: BevGridSpec, radar_grid: BevGridSpec) -> None:
    if not cam_grid.same_geometry(radar_grid):
        raise GridMismatchError(f"camera grid {cam_grid.to_dict()} != radar grid {radar_grid.to_dict()}")


def fuse(cam_bev: Tensor, radar_bev: Tensor, cam_grid: BevGridSpec, radar_grid: BevGridSpec,
         params: FusionConv) -> FusedBev:
    """Concatenate camera and radar BEV maps and reduce to the camera width.

    Accepts (C, H, W) or batched (N, C, H, W) inputs. The two grids are
    compared structurally and must describe the same plane; nothing is
    ever resampled.
    """
    check_grids(cam_grid, radar_grid)
    single = cam_bev.ndim == 3
    if cam_bev.ndim != radar_bev.ndim or cam_bev.ndim not in (3, 4):
        raise ValueError(f"expected matching (C,H,W) or (N,C,H,W) inputs, got {cam_bev.shape} and {radar_bev.shape}")
    if cam_bev.shape[-2:] != radar_bev.shape[-2:] or cam_bev.shape[-2:] != cam_grid.shape:
        raise GridMismatchError(
            f"spatial shapes differ: camera {cam_bev.shape[-2:]}, radar {radar_bev.shape[-2:]}, grid {cam_grid.shape}")
    if not single and cam_bev.shape[0] != radar_bev.shape[0]:
        raise ValueError("batch sizes differ")
    if cam_bev.shape[-3] != params.cam_channels or radar_bev.shape[-3] != params.radar_channels:
        raise ValueError(
            f"channel counts ({cam_bev.shape[-3]}, {radar_bev.shape[-3]}) do not match fusion layer "
            f"({params.cam_channels}, {params.radar_channels})")
    cam4 = cam_bev.reshape((1,) + cam_bev.shape) if single else cam_bev
    rad4 = radar_bev.reshape((1,) + radar_bev.shape) if single else radar_bev
    out = params(cam4, rad4)
    if single:
        out = out.reshape(out.shape[1:])
    return FusedBev(out, {"camera": tuple(cam_bev.shape), "radar": tuple(radar_bev.shape), "fused": tuple(out.shape)})


class BevEncoder(Module):
    """Residual BEV encoder at full BEV resolution (stride 1)."""

    def __init__(self, in_channels: int, channels: int, out_channels: int, blocks: int = 2, rng=None):
        super().__init__()
        self.out_channels = out_channels
        self.net = ResidualBackbone(in_channels, channels, [(channels, blocks, 1)], out_channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def bev_encoder(fused, params: BevEncoder) -> Tensor:
    x = fused.features if isinstance(fused, FusedBev) else fused
    single = x.ndim == 3
    out = params(x.reshape((1,) + x.shape) if single else x)
    return out.reshape(out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# shape table for the full-size camera configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BevLayout:
    name: str
    cam_channels: int      # view-transformer output channels
    cell: float            # BEV feature cell, meters
    encoder_channels: int  # BEV encoder output channels
    extent: float = 51.2   # half-width of the square BEV plane
    radar_stride: int = 4  # radar backbone downsampling

    @property
    def bev_grid(self) -> BevGridSpec:
        return BevGridSpec(-self.extent, self.extent, -self.extent, self.extent, self.cell)

    @property
    def radar_grid(self) -> BevGridSpec:
        """Radar input grid chosen so the backbone output lands on ``bev_grid``."""
        return BevGridSpec(-self.extent, self.extent, -self.extent, self.extent, self.cell / self.radar_stride)


FULL_SIZE_LAYOUTS = (
    BevLayout("bevdet", 80, 0.4, 256),
    BevLayout("bevdepth", 80, 0.8, 64),
    BevLayout("bevstereo", 80, 0.8, 64),
    BevLayout("matrixvt", 80, 0.8, 64),
)


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def backbone_output_hw(net: ResidualBackbone, hw: Tuple[int, int]) -> Tuple[int, int]:
    """Spatial size after ``net`` by convolution arithmetic alone."""
    h, w = hw
    convs: List[Conv2d] = [net.stem] + [b.conv1 for b in net.blocks]
    for conv in convs:
        k = conv.weight.shape[-1]
        h, w = conv_out(h, k, conv.stride, conv.padding), conv_out(w, k, conv.stride, conv.padding)
    return h, w


def shape_table(radar_channels: int = 32) -> List[Dict[str, object]]:
    """Per-layout tensor shapes through radar branch, fusion and BEV encoder."""
    from .radar import radar_backbone_layout

    rows = []
    for lay in FULL_SIZE_LAYOUTS:
        radar_in = (radar_channels,) + lay.radar_grid.shape
        h, w = radar_in[1], radar_in[2]
        for _, _, stride in radar_backbone_layout(radar_channels):
            h, w = conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1)
        rows.append({
            "config": lay.name,
            "radar_input": radar_in,
            "radar_output": (lay.cam_channels, h, w),
            "camera_bev": (lay.cam_channels,) + lay.bev_grid.shape,
            "fused": (lay.cam_channels,) + lay.bev_grid.shape,
            "encoder_output": (lay.encoder_channels,) + lay.bev_grid.shape,
        })
    return rows
