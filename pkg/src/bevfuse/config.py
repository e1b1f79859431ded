"""Pipeline configuration: flat ``section.key = value`` text files.

Grammar (see docs/config.md)::

    # comment            blank lines and '#' comments are ignored
    [section]            optional header; following bare keys get "section." prefixed
    section.key = value  value is int, float, bool (true/false/yes/no/on/off) or a string

Unknown keys, malformed lines and invalid values raise ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

from .data.synthetic import SceneGenConfig
from .geometry import BevGridSpec

RADAR_ENCODERS = ("none", "grid_map", "bev_feature_net")
VIEW_TRANSFORMS = ("lss", "matrixvt")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class GridSection:
    extent: float = 25.6        # square plane [-extent, extent)
    cell: float = 1.6           # BEV feature cell (camera BEV, fused map, head)
    radar_stride: int = 4       # radar backbone downsampling; radar input cell = cell / stride


@dataclass(frozen=True)
class ModelSection:
    radar: str = "bev_feature_net"
    view: str = "lss"
    bev_channels: int = 32      # fused / encoder width
    bev_blocks: int = 2
    head_hidden: int = 32
    bev_coords: bool = True     # append normalized x/y channels to the fused BEV map


@dataclass(frozen=True)
class CameraSection:
    downscale: int = 1          # image resize factor applied on load
    stem: int = 16
    width: int = 32             # stage widths: width, 2*width
    context: int = 32           # camera BEV channels
    coord_channels: bool = True
    d_min: float = 1.0
    d_max: float = 37.0
    depth_bins: int = 36


@dataclass(frozen=True)
class RadarSection:
    sweeps: int = 5
    channels: int = 32          # BEVFeatureNet C
    max_cells: int = 2000       # B
    max_points: int = 10        # N_p
    backbone_width: int = 4
    blur: bool = False
    skew: bool = False


@dataclass(frozen=True)
class LossSection:
    alpha: float = 2.0
    beta: float = 4.0
    heatmap_weight: float = 1.0
    reg_weight: float = 2.5
    velocity_weight: float = 4.0   # extra factor on the two velocity regression channels


@dataclass(frozen=True)
class OptimSection:
    lr: float = 2e-3
    weight_decay: float = 1e-2


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10
    batch: int = 4
    seed: int = 0
    train_fraction: float = 0.75   # leading share of the dataset used for training


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = False
    flip_prob: float = 0.5


@dataclass(frozen=True)
class DecodeSection:
    score_thresh: float = 0.1
    max_dets: int = 100


@dataclass(frozen=True)
class BenchSection:
    frames: int = 100
    warmup: int = 3


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSection = field(default_factory=GridSection)
    model: ModelSection = field(default_factory=ModelSection)
    camera: CameraSection = field(default_factory=CameraSection)
    radar: RadarSection = field(default_factory=RadarSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    bench: BenchSection = field(default_factory=BenchSection)
    data: SceneGenConfig = field(default_factory=SceneGenConfig)

    def __post_init__(self):
        validate(self)

    # -- derived geometry --------------------------------------------------------
    @property
    def bev_grid(self) -> BevGridSpec:
        e = self.grid.extent
        return BevGridSpec(-e, e, -e, e, self.grid.cell)

    @property
    def radar_grid(self) -> BevGridSpec:
        e = self.grid.extent
        return BevGridSpec(-e, e, -e, e, self.grid.cell / self.grid.radar_stride)

    @property
    def camera_only(self) -> bool:
        return self.model.radar == "none"

    def with_overrides(self, pairs: Iterable[Tuple[str, str]]) -> "PipelineConfig":
        return apply_pairs(self, pairs)

    def to_text(self) -> str:
        return dump_config(self)


def validate(cfg: PipelineConfig) -> None:
    if cfg.model.radar not in RADAR_ENCODERS:
        raise ConfigError(f"model.radar must be one of {RADAR_ENCODERS}, got {cfg.model.radar!r}")
    if cfg.model.view not in VIEW_TRANSFORMS:
        raise ConfigError(f"model.view must be one of {VIEW_TRANSFORMS}, got {cfg.model.view!r}")
    try:
        cfg.bev_grid
        cfg.radar_grid
    except ValueError as e:
        raise ConfigError(f"grid: {e}") from e
    if cfg.grid.radar_stride != 4:
        raise ConfigError("the radar backbone downsamples by exactly 4; grid.radar_stride must be 4")
    positive = {
        "camera.downscale": cfg.camera.downscale, "camera.depth_bins": cfg.camera.depth_bins,
        "camera.context": cfg.camera.context, "radar.sweeps": cfg.radar.sweeps,
        "radar.channels": cfg.radar.channels, "radar.backbone_width": cfg.radar.backbone_width,
        "train.epochs": cfg.train.epochs, "train.batch": cfg.train.batch, "bench.frames": cfg.bench.frames,
    }
    for k, v in positive.items():
        if v < 1:
            raise ConfigError(f"{k} must be >= 1, got {v}")
    if not 0 < cfg.camera.d_min < cfg.camera.d_max:
        raise ConfigError("camera depth range needs 0 < d_min < d_max")
    if not 0 < cfg.train.train_fraction <= 1:
        raise ConfigError("train.train_fraction must be in (0, 1]")
    if cfg.data.image_width % cfg.camera.downscale or cfg.data.image_height % cfg.camera.downscale:
        raise ConfigError("image size must be divisible by camera.downscale")
    stride = 8 * cfg.camera.downscale
    if cfg.data.image_width % stride or cfg.data.image_height % stride:
        raise ConfigError(f"image size must be divisible by {stride} (encoder stride 8 x downscale)")


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_LINE = re.compile(r"^([A-Za-z_][\w]*(?:\.[A-Za-z_][\w]*)?)\s*=\s*(.*?)\s*$")
_SECTION = re.compile(r"^\[([A-Za-z_]\w*)\]$")
_BOOLS = {"true": True, "yes": True, "on": True, "1": True,
          "false": False, "no": False, "off": False, "0": False}
# data.* keys that are structured and cannot be set from text
_DATA_FIXED = {"classes", "cameras", "radars"}


def _coerce(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            if raw.lower() not in _BOOLS:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOLS[raw.lower()]
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, str):
            return raw.strip('"').strip("'")
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    raise ConfigError(f"{key} cannot be set from a config file")


def parse_pairs(text: str, source: str = "<config>") -> List[Tuple[str, str]]:
    pairs, section = [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        m = _SECTION.match(stripped)
        if m:
            section = m.group(1)
            continue
        m = _LINE.match(stripped)
        if not m:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line.strip()!r}")
        key, value = m.group(1), m.group(2)
        if "." not in key:
            if section is None:
                raise ConfigError(f"{source}:{lineno}: key {key!r} has no section")
            key = f"{section}.{key}"
        pairs.append((key, value))
    return pairs


def apply_pairs(cfg: PipelineConfig, pairs: Iterable[Tuple[str, str]]) -> PipelineConfig:
    sections: Dict[str, object] = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, raw in pairs:
        sec, _, name = key.partition(".")
        if sec not in sections:
            raise ConfigError(f"unknown section {sec!r} in {key!r}")
        obj = sections[sec]
        known = {f.name for f in fields(obj)}
        if name not in known or (sec == "data" and name in _DATA_FIXED):
            raise ConfigError(f"unknown key {key!r}")
        value = _coerce(key, raw, getattr(obj, name))
        try:
            sections[sec] = replace(obj, **{name: value})
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from e
    try:
        return PipelineConfig(**sections)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    return apply_pairs(PipelineConfig(), parse_pairs(text, source))


def load_config(path) -> PipelineConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    return parse_config(text, str(p))


def dump_config(cfg: PipelineConfig) -> str:
    """Every settable key, one per line; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for g in fields(sec):
            if f.name == "data" and g.name in _DATA_FIXED:
                continue
            v = getattr(sec, g.name)
            text = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{g.name} = {text}")
        lines.append("")
    return "\n".join(lines)


def config_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)
