"""Boxes, cameras, BEV grids and the global 3D augmentation.

Frames: ego x forward, y left, z up; yaw counter-clockwise from +x.
Camera frame follows the pinhole convention x right, y down, z forward.
A BEV tensor is indexed ``[channel, row, col]`` with row along y and col
along x; cell (0, 0) touches (x_min, y_min).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_yaw(yaw):
    """Wrap angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(yaw, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Box3D:
    center: np.ndarray
    size: np.ndarray  # (w, l, h); l runs along the heading
    yaw: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    class_id: int = 0
    attribute_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        if not (self.size > 0).all():
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = normalize_yaw(self.yaw)
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def w(self) -> float:
        return float(self.size[0])

    @property
    def l(self) -> float:  # noqa: E743
        return float(self.size[1])

    @property
    def h(self) -> float:
        return float(self.size[2])

    def corners(self) -> np.ndarray:
        """(8, 3) corners: bottom face counter-clockwise, then the top face."""
        w, l, h = self.size
        xs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * l / 2
        ys = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * w / 2
        zs = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * h / 2
        local = np.stack([xs, ys, zs], axis=1)
        return local @ rotation_z(self.yaw).T + self.center

    def bev_corners(self) -> np.ndarray:
        return self.corners()[:4, :2]

    def contains_bev(self, xy: np.ndarray, inflate: float = 1.0) -> np.ndarray:
        xy = np.atleast_2d(xy) - self.center[:2]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        along = xy[:, 0] * c + xy[:, 1] * s
        across = -xy[:, 0] * s + xy[:, 1] * c
        return (np.abs(along) <= inflate * self.l / 2 + 1e-9) & (np.abs(across) <= inflate * self.w / 2 + 1e-9)

    def to_dict(self) -> dict:
        d = {
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "yaw": float(self.yaw),
            "velocity": [float(v) for v in self.velocity],
            "class_id": int(self.class_id),
            "attribute_id": int(self.attribute_id),
        }
        if self.score is not None:
            d["score"] = float(self.score)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(center=d["center"], size=d["size"], yaw=d["yaw"], velocity=d.get("velocity", (0, 0)),
                   class_id=int(d.get("class_id", 0)), attribute_id=int(d.get("attribute_id", 0)),
                   score=d.get("score"))


@dataclass(frozen=True)
class BevGridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            if hi <= lo:
                raise ValueError("grid extent must have max > min")
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"extent {hi - lo} is not a multiple of cell {self.cell}")

    @property
    def W(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def H(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.H, self.W

    def cells(self, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized binning: (rows, cols, inside) over half-open extents."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        cols = np.floor((x - self.x_min) / self.cell).astype(np.int64)
        rows = np.floor((y - self.y_min) / self.cell).astype(np.int64)
        inside = (
            (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)
            & (rows >= 0) & (rows < self.H) & (cols >= 0) & (cols < self.W)
        )
        return rows, cols, inside

    def flat_index(self, x, y) -> np.ndarray:
        """Row-major cell index, or -1 outside the grid."""
        rows, cols, inside = self.cells(x, y)
        return np.where(inside, rows * self.W + cols, -1)

    def cell_center(self, row, col) -> Tuple[np.ndarray, np.ndarray]:
        return (self.x_min + (np.asarray(col) + 0.5) * self.cell,
                self.y_min + (np.asarray(row) + 0.5) * self.cell)

    def downsample(self, factor: int) -> "BevGridSpec":
        return replace(self, cell=self.cell * factor)

    def same_geometry(self, other: "BevGridSpec") -> bool:
        return all(math.isclose(a, b, abs_tol=1e-9) for a, b in (
            (self.x_min, other.x_min), (self.x_max, other.x_max),
            (self.y_min, other.y_min), (self.y_max, other.y_max), (self.cell, other.cell)))

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "cell": self.cell}


def ego_to_bev_cell(x: float, y: float, grid: BevGridSpec) -> Optional[Tuple[int, int]]:
    """(row, col) of the cell containing (x, y), or None when outside the grid."""
    rows, cols, inside = grid.cells(x, y)
    if not bool(inside):
        return None
    return int(rows), int(cols)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class CameraModel:
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 4x4 camera -> ego
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        k = self.intrinsics
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(k[0, 1]) > 1e-12:
            raise ValueError("camera skew must be zero")
        r = self.extrinsics[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    def ego_to_camera(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return (pts - self.position) @ self.rotation

    def camera_to_ego(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return pts @ self.rotation.T + self.position

    def project(self, pts_ego: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized projection: (u, v, depth, in_front)."""
        pc = self.ego_to_camera(pts_ego)
        depth = pc[:, 2]
        in_front = depth > 1e-9
        safe = np.where(in_front, depth, 1.0)
        u = self.fx * pc[:, 0] / safe + self.cx
        v = self.fy * pc[:, 1] / safe + self.cy
        return u, v, depth, in_front

    def unproject(self, u, v, depth) -> np.ndarray:
        """Ego-frame points at camera-frame depth ``depth`` along pixel rays."""
        u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
        xc = (u - self.cx) / self.fx * depth
        yc = (v - self.cy) / self.fy * depth
        pc = np.stack([xc.ravel(), yc.ravel(), depth.ravel()], axis=1)
        return self.camera_to_ego(pc).reshape(u.shape + (3,))

    def scaled(self, factor: float) -> "CameraModel":
        """Same camera with the image resampled by ``factor`` (pixel-center aligned)."""
        k = self.intrinsics.copy()
        k[0, 0] *= factor
        k[1, 1] *= factor
        k[0, 2] = (k[0, 2] + 0.5) * factor - 0.5
        k[1, 2] = (k[1, 2] + 0.5) * factor - 0.5
        return CameraModel(k, self.extrinsics, int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(v) for v in self.intrinsics.ravel()],
            "extrinsics": [float(v) for v in self.extrinsics.ravel()],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        if len(d["intrinsics"]) != 9 or len(d["extrinsics"]) != 16:
            raise ValueError("calibration needs 9 intrinsic and 16 extrinsic values")
        return cls(np.array(d["intrinsics"]), np.array(d["extrinsics"]), int(d["width"]), int(d["height"]))


BEHIND_CAMERA = None


def project_to_image(point_ego, camera: CameraModel):
    """(u, v, depth) of one ego point, or ``BEHIND_CAMERA`` (None)."""
    u, v, d, ok = camera.project(np.asarray(point_ego, dtype=np.float64).reshape(1, 3))
    if not ok[0]:
        return BEHIND_CAMERA
    return float(u[0]), float(v[0]), float(d[0])


def mounted_camera(position: Sequence[float], heading: float, width: int, height: int,
                   hfov_deg: float, pitch: float = 0.0) -> CameraModel:
    """Camera at ``position`` looking along ego ``heading`` (rad), tilted down by ``pitch``."""
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    k = np.array([[fx, 0.0, width / 2.0 - 0.5], [0.0, fx, height / 2.0 - 0.5], [0.0, 0.0, 1.0]])
    # columns: camera x (right), y (down), z (forward) expressed in ego
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    cp, sp = math.cos(pitch), math.sin(pitch)
    # columns are the tilted camera axes in the untilted camera frame
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    r = rotation_z(heading) @ base @ tilt
    ext = np.eye(4)
    ext[:3, :3] = r
    ext[:3, 3] = position
    return CameraModel(k, ext, width, height)


def load_calibration(path) -> Dict[str, CameraModel]:
    data = json.loads(Path(path).read_text())
    return {name: CameraModel.from_dict(d) for name, d in data.items()}


def save_calibration(cameras: Dict[str, CameraModel], path) -> None:
    Path(path).write_text(json.dumps({k: c.to_dict() for k, c in cameras.items()}, indent=2))


# ---------------------------------------------------------------------------
# 3D augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rot: float = 0.0
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False

    def matrix(self) -> np.ndarray:
        """2x2 BEV map applied as flip, then rotation, then scale."""
        if self.scale <= 0:
            raise ValueError("augmentation scale must be positive")
        f = np.diag([-1.0 if self.flip_x else 1.0, -1.0 if self.flip_y else 1.0])
        c, s = math.cos(self.rot), math.sin(self.rot)
        return self.scale * np.array([[c, -s], [s, c]]) @ f


@dataclass
class AugmentResult:
    points: np.ndarray
    boxes: List[Box3D]
    bev_transform: np.ndarray  # 2x2, ego BEV coordinates p' = A p


def augment3d(points: np.ndarray, boxes: Sequence[Box3D], params: AugmentParams) -> AugmentResult:
    """Apply one flip/rotate/scale map to radar points and boxes.

    ``points`` columns are [x, y, rcs, v_d, ...]; radial Doppler is invariant
    to rotation and reflection about the ego origin and scales with the map.
    Box velocities live in the ego frame and are transformed like positions.
    """
    a = params.matrix()
    pts = np.array(points, dtype=np.float64, copy=True)
    if pts.size:
        pts[:, :2] = pts[:, :2] @ a.T
        pts[:, 3] *= params.scale
    out = []
    for b in boxes:
        center = b.center.copy()
        center[:2] = a @ center[:2]
        center[2] *= params.scale
        heading = a @ np.array([math.cos(b.yaw), math.sin(b.yaw)])
        out.append(replace(
            b,
            center=center,
            size=b.size * params.scale,
            yaw=normalize_yaw(math.atan2(heading[1], heading[0])),
            velocity=a @ b.velocity,
        ))
    return AugmentResult(pts, out, a)


def warp_bev_indices(grid: BevGridSpec, transform: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gather indices realizing ``transform`` on a BEV map (nearest cell).

    Returns (source_flat_index, valid) for every output cell, so that
    ``out.flat[i] = in.flat[src[i]] if valid[i] else 0``.
    """
    rows, cols = np.meshgrid(np.arange(grid.H), np.arange(grid.W), indexing="ij")
    x, y = grid.cell_center(rows.ravel(), cols.ravel())
    src = np.linalg.solve(transform, np.stack([x, y]))
    idx = grid.flat_index(src[0], src[1])
    return np.where(idx >= 0, idx, 0), idx >= 0
