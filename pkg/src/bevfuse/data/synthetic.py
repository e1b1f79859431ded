"""Deterministic synthetic driving scenes: boxes, radar sweeps and camera images.

Every sample is a pure function of ``(cfg.seed, t)``. Objects move with
constant velocity; radar sweeps are simulated at their own (past) times and
the ego vehicle drives along +x at ``ego_speed``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import Box3D, CameraModel, mounted_camera
from ..radar import RadarSweep, aggregate_sweeps, radial_velocity


@dataclass(frozen=True)
class ClassSpec:
    name: str
    size: Tuple[float, float, float]   # mean (w, l, h)
    size_jitter: float                 # relative std of each dimension
    count: Tuple[int, int]             # objects per scene, inclusive range
    moving_prob: float
    speed: Tuple[float, float]         # m/s when moving
    lane_aligned: bool                 # headings follow the road (+-x)
    rcs: float                         # mean dBsm
    points_per_sweep: float            # Poisson rate of outline detections
    color: Tuple[float, float, float]


DEFAULT_CLASSES = (
    ClassSpec("car", (1.9, 4.5, 1.6), 0.08, (2, 5), 0.6, (3.0, 12.0), True, 10.0, 2.0, (0.85, 0.15, 0.1)),
    ClassSpec("pedestrian", (0.7, 0.7, 1.75), 0.1, (0, 3), 0.7, (0.6, 2.0), False, -5.0, 0.7, (0.1, 0.8, 0.2)),
    ClassSpec("truck", (2.5, 8.0, 3.0), 0.1, (0, 2), 0.5, (2.0, 10.0), True, 18.0, 3.0, (0.15, 0.3, 0.9)),
)
# per class: 0 moving, 1 stopped (parked / standing)
ATTRIBUTE_NAMES = ("moving", "stopped")


@dataclass(frozen=True)
class CameraSpec:
    name: str
    position: Tuple[float, float, float]
    heading: float
    hfov_deg: float
    pitch: float = 0.0


@dataclass(frozen=True)
class RadarSpec:
    name: str
    position: Tuple[float, float]
    heading: float


DEFAULT_CAMERAS = (
    CameraSpec("cam0", (1.5, 0.0, 1.5), 0.0, 110.0),
    CameraSpec("cam1", (-1.0, 0.0, 1.5), math.pi, 110.0),
)
DEFAULT_RADARS = (
    RadarSpec("front", (2.0, 0.0), 0.0),
    RadarSpec("rear", (-1.0, 0.0), math.pi),
)
SCENE_TAGS = ("day", "clear", "rain", "night", "intersection", "highway", "parking lot", "city")


@dataclass(frozen=True)
class SceneGenConfig:
    seed: int = 0
    extent: float = 25.6               # objects stay within |x|, |y| < extent - margin
    margin: float = 1.0
    road_half_width: float = 14.0
    classes: Tuple[ClassSpec, ...] = DEFAULT_CLASSES
    ego_speed: float = 5.0
    sweeps: int = 5
    radar_hz: float = 13.0
    pos_sigma: float = 0.15
    rcs_sigma: float = 2.0
    vd_sigma: float = 0.1
    clutter_rate: float = 12.0          # points per sweep over the whole extent
    image_width: int = 704
    image_height: int = 256
    cameras: Tuple[CameraSpec, ...] = DEFAULT_CAMERAS
    radars: Tuple[RadarSpec, ...] = DEFAULT_RADARS
    night_prob: float = 0.25
    rain_prob: float = 0.25
    night_gain: float = 0.18
    rain_contrast: float = 0.55
    rain_speckle: float = 0.04
    image_noise: float = 0.03
    max_tries: int = 200

    def __post_init__(self):
        rates = [self.clutter_rate, self.night_prob, self.rain_prob] + [c.points_per_sweep for c in self.classes]
        if min(rates) < 0:
            raise ValueError("rates must be non-negative")
        if min(self.pos_sigma, self.rcs_sigma, self.vd_sigma, self.image_noise) < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.sweeps < 1 or self.radar_hz <= 0:
            raise ValueError("need at least one sweep and a positive radar rate")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def camera_models(self) -> List[CameraModel]:
        return [mounted_camera(c.position, c.heading, self.image_width, self.image_height, c.hfov_deg, c.pitch)
                for c in self.cameras]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ClassSpec(**{**c, "size": tuple(c["size"]), "count": tuple(c["count"]),
                                              "speed": tuple(c["speed"]), "color": tuple(c["color"])})
                                 for c in d["classes"])
        if "cameras" in d:
            d["cameras"] = tuple(CameraSpec(**{**c, "position": tuple(c["position"])}) for c in d["cameras"])
        if "radars" in d:
            d["radars"] = tuple(RadarSpec(**{**c, "position": tuple(c["position"])}) for c in d["radars"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SampleBundle:
    sample_id: str
    timestamp_us: int
    images: np.ndarray               # (N_i, H, W, 3) float32 in [0, 1]
    cameras: List[CameraModel]
    sweeps: List[RadarSweep]         # newest first, each in its own ego frame
    boxes: List[Box3D]
    description: str
    point_owner: List[np.ndarray] = field(default_factory=list)  # per sweep, object index or -1

    def radar_points(self, count: Optional[int] = None) -> np.ndarray:
        """Aggregated (M, 5) points in the latest ego frame."""
        return aggregate_sweeps(self.sweeps, count or len(self.sweeps))

    @property
    def tags(self) -> List[str]:
        return [t.strip() for t in self.description.split(",")]


# ---------------------------------------------------------------------------
# object placement
# ---------------------------------------------------------------------------

def _footprint_radius(size) -> float:
    return 0.5 * math.hypot(size[0], size[1])


def sample_boxes(cfg: SceneGenConfig, rng: np.random.Generator) -> List[Box3D]:
    """Non-overlapping boxes; raises after ``max_tries`` failed placements."""
    lim = cfg.extent - cfg.margin
    boxes: List[Box3D] = []
    for cls_id, spec in enumerate(cfg.classes):
        n = int(rng.integers(spec.count[0], spec.count[1] + 1))
        for _ in range(n):
            size = np.array(spec.size) * np.clip(1 + spec.size_jitter * rng.standard_normal(3), 0.7, 1.3)
            rad = _footprint_radius(size)
            for _ in range(cfg.max_tries):
                x = rng.uniform(-lim + rad, lim - rad)
                y = rng.uniform(-min(lim, cfg.road_half_width) + rad, min(lim, cfg.road_half_width) - rad)
                if abs(x) < 3.5 + rad and abs(y) < 1.5 + rad:
                    continue  # ego vehicle
                if all(math.hypot(x - b.center[0], y - b.center[1]) > rad + _footprint_radius(b.size) + 0.5
                       for b in boxes):
                    break
            else:
                raise RuntimeError(f"could not place a {spec.name} after {cfg.max_tries} tries")
            if spec.lane_aligned:
                yaw = (0.0 if y < 0 else math.pi) + rng.normal(0, 0.05)
            else:
                yaw = rng.uniform(-math.pi, math.pi)
            moving = rng.random() < spec.moving_prob
            speed = rng.uniform(*spec.speed) if moving else 0.0
            vel = speed * np.array([math.cos(yaw), math.sin(yaw)])
            boxes.append(Box3D([x, y, size[2] / 2], size, yaw, vel, class_id=cls_id,
                               attribute_id=0 if moving else 1))
    return boxes


# ---------------------------------------------------------------------------
# radar
# ---------------------------------------------------------------------------

def _sensor_for(cfg: SceneGenConfig, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the radar whose boresight is closest to each point's bearing."""
    scores = []
    for r in cfg.radars:
        bearing = np.arctan2(y - r.position[1], x - r.position[0])
        scores.append(np.cos(bearing - r.heading))
    return np.argmax(np.stack(scores), axis=0)


def outline_points(box: Box3D, n: int, rng: np.random.Generator, pos_sigma: float) -> np.ndarray:
    """``n`` noisy points on the footprint outline, clamped to 1.2x the footprint."""
    l, w = box.l, box.w
    s = rng.uniform(0, 2 * (l + w), n)
    along = np.where(s < l, s - l / 2, np.where(s < l + w, l / 2, np.where(s < 2 * l + w, l / 2 - (s - l - w), -l / 2)))
    across = np.where(s < l, -w / 2, np.where(s < l + w, -w / 2 + (s - l), np.where(s < 2 * l + w, w / 2,
                                                                                         w / 2 - (s - 2 * l - w))))
    along = np.clip(along + rng.normal(0, pos_sigma, n), -0.6 * l, 0.6 * l)
    across = np.clip(across + rng.normal(0, pos_sigma, n), -0.6 * w, 0.6 * w)
    c, sn = math.cos(box.yaw), math.sin(box.yaw)
    return np.column_stack([box.center[0] + along * c - across * sn, box.center[1] + along * sn + across * c])


def boxes_at(boxes: Sequence[Box3D], dt: float, ego_shift: float) -> List[Box3D]:
    """Boxes ``dt`` seconds earlier, in the ego frame of that time."""
    out = []
    for b in boxes:
        c = b.center.copy()
        c[:2] = c[:2] - b.velocity * dt
        c[0] += ego_shift
        out.append(replace(b, center=c))
    return out


def simulate_sweep(cfg: SceneGenConfig, boxes: Sequence[Box3D], rng: np.random.Generator
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """(M, 4) detections [x, y, rcs, v_d] and the owning object index (-1 = clutter)."""
    pts, owner = [], []
    for j, b in enumerate(boxes):
        spec = cfg.classes[b.class_id]
        n = int(rng.poisson(spec.points_per_sweep))
        if n == 0:
            continue
        xy = outline_points(b, n, rng, cfg.pos_sigma)
        sensor = _sensor_for(cfg, xy[:, 0], xy[:, 1])
        sxy = np.array([cfg.radars[k].position for k in sensor])
        vd = radial_velocity(xy[:, 0], xy[:, 1], b.velocity[0], b.velocity[1], (sxy[:, 0], sxy[:, 1]))
        vd = vd + rng.normal(0, cfg.vd_sigma, n)
        rcs = spec.rcs + rng.normal(0, cfg.rcs_sigma, n)
        pts.append(np.column_stack([xy, rcs, vd]))
        owner.append(np.full(n, j))
    m = int(rng.poisson(cfg.clutter_rate))
    if m:
        xy = rng.uniform(-cfg.extent, cfg.extent, (m, 2))
        pts.append(np.column_stack([xy, rng.normal(-5, 5, m), rng.normal(0, cfg.vd_sigma, m)]))
        owner.append(np.full(m, -1))
    if not pts:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(owner).astype(np.int64)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

BOX_FACES = ((0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7))
FACE_SHADE = (0.55, 1.0, 0.8, 0.65, 0.8, 0.65)
NEAR = 0.1


def clip_near(poly: np.ndarray, near: float = NEAR) -> np.ndarray:
    """Clip a camera-frame polygon (K, 3) to z >= near."""
    out = []
    k = len(poly)
    for i in range(k):
        a, b = poly[i], poly[(i + 1) % k]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            out.append(a)
        if ina != inb:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out).reshape(-1, 3)


def fill_convex(poly_uv: np.ndarray, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel (row, col) indices whose centers lie inside a convex polygon."""
    if len(poly_uv) < 3:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    u0 = max(int(math.floor(poly_uv[:, 0].min())), 0)
    u1 = min(int(math.ceil(poly_uv[:, 0].max())), width - 1)
    v0 = max(int(math.floor(poly_uv[:, 1].min())), 0)
    v1 = min(int(math.ceil(poly_uv[:, 1].max())), height - 1)
    if u0 > u1 or v0 > v1:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    a = poly_uv
    b = np.roll(poly_uv, -1, axis=0)
    cross = ((b[:, 0] - a[:, 0])[:, None, None] * (vv - a[:, 1, None, None])
             - (b[:, 1] - a[:, 1])[:, None, None] * (uu - a[:, 0, None, None]))
    inside = (cross >= 0).all(axis=0) | (cross <= 0).all(axis=0)
    return vv[inside], uu[inside]


def project_faces(box: Box3D, cam: CameraModel) -> List[Tuple[float, int, np.ndarray]]:
    """(mean depth, face index, image polygon) of every face in front of the camera."""
    pc = cam.ego_to_camera(box.corners())
    faces = []
    for fi, idx in enumerate(BOX_FACES):
        poly = clip_near(pc[list(idx)])
        if len(poly) < 3:
            continue
        uv = (cam.intrinsics @ (poly / poly[:, 2:3]).T).T[:, :2]
        faces.append((float(poly[:, 2].mean()), fi, uv))
    return faces


def object_mask(box: Box3D, cam: CameraModel) -> np.ndarray:
    """Rendered silhouette of one box alone."""
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    for _, _, uv in project_faces(box, cam):
        r, c = fill_convex(uv, cam.width, cam.height)
        mask[r, c] = True
    return mask


def _background(cam: CameraModel, rng: np.random.Generator) -> np.ndarray:
    h, w = cam.height, cam.width
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = cam.unproject(uu, vv, np.ones_like(uu)) - cam.position
    down = rays[..., 2] < 0
    img = np.empty((h, w, 3))
    sky = 0.75 - 0.2 * (vv / h)
    img[...] = np.stack([sky * 0.85, sky * 0.9, sky], axis=-1)
    # ground: distance-shaded asphalt
    dist = np.where(down, cam.position[2] / np.maximum(-rays[..., 2], 1e-6), 0.0)
    ground = 0.28 + 0.12 * np.exp(-dist / 30.0)
    img[down] = ground[down, None]
    img += rng.normal(0, 0.03, (h, w, 1))
    return img


def render_camera(cam: CameraModel, boxes: Sequence[Box3D], classes: Sequence[ClassSpec],
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Image (H, W, 3) and instance-id map (-1 background), painter's order."""
    img = _background(cam, rng)
    ids = np.full((cam.height, cam.width), -1, dtype=np.int64)
    faces = []
    for j, b in enumerate(boxes):
        for depth, fi, uv in project_faces(b, cam):
            faces.append((depth, j, fi, uv))
    faces.sort(key=lambda f: (-f[0], f[1], f[2]))
    for _, j, fi, uv in faces:
        r, c = fill_convex(uv, cam.width, cam.height)
        color = np.array(classes[boxes[j].class_id].color) * FACE_SHADE[fi]
        img[r, c] = color
        ids[r, c] = j
    return img, ids


def apply_conditions(img: np.ndarray, tags: Sequence[str], cfg: SceneGenConfig,
                     rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    if "rain" in tags:
        out = cfg.rain_contrast * out + (1 - cfg.rain_contrast) * out.mean()
        speck = rng.random(out.shape[:2]) < cfg.rain_speckle
        out[speck] = 0.95
    if "night" in tags:
        out = out * cfg.night_gain
    out = out + rng.normal(0, cfg.image_noise, out.shape)
    # quantize to 8 bits so file round trips are exact
    return (np.round(np.clip(out, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def sample_description(rng: np.random.Generator, cfg: SceneGenConfig) -> str:
    tags = ["night" if rng.random() < cfg.night_prob else "day"]
    if rng.random() < cfg.rain_prob:
        tags.append("rain")
    tags.append(str(rng.choice(["intersection", "highway", "parking lot", "city"])))
    return ", ".join(tags)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def sample_rng(cfg: SceneGenConfig, t: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg.seed), int(t)])


def build_bundle(cfg: SceneGenConfig, t: int, boxes: Sequence[Box3D], description: str,
                 rng: np.random.Generator) -> SampleBundle:
    """Simulate sensors for given boxes (latest ego frame at time ``t`` frames)."""
    period = 1.0 / cfg.radar_hz
    ts = int(t) * 500_000 + 1_000_000  # 2 Hz keyframes
    ego_x = cfg.ego_speed * ts * 1e-6
    sweeps, owners = [], []
    for k in range(cfg.sweeps):
        dt = k * period
        past = boxes_at(boxes, dt, cfg.ego_speed * dt)
        pts, own = simulate_sweep(cfg, past, rng)
        stamp = ts - int(round(dt * 1e6))
        sweeps.append(RadarSweep(stamp, pts, (ego_x - cfg.ego_speed * dt, 0.0, 0.0)))
        owners.append(own)
    tags = [s.strip() for s in description.split(",")]
    cams = cfg.camera_models()
    images = []
    for cam in cams:
        img, _ = render_camera(cam, boxes, cfg.classes, rng)
        images.append(apply_conditions(img, tags, cfg, rng))
    return SampleBundle(f"{cfg.seed:04d}-{int(t):06d}", ts, np.stack(images), cams, sweeps, list(boxes),
                        description, owners)


def generate_scene(cfg: SceneGenConfig, t: int) -> SampleBundle:
    """Fully deterministic sample for ``(cfg.seed, t)``."""
    rng = sample_rng(cfg, t)
    boxes = sample_boxes(cfg, rng)
    description = sample_description(rng, cfg)
    return build_bundle(cfg, t, boxes, description, rng)
