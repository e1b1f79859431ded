"""Oracle check suites shared by the test suite and ``bevfuse check``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .data.sweep_io import SweepFormatError, decode_sweep, encode_sweep
from .geometry import BevGridSpec, Box3D, CameraModel, mounted_camera
from .head import R, DecodeConfig, decode, gaussian_focal_loss, make_targets, regression_l1_loss
from .metrics import NDS_TOLERANCE, check_published_rows
from .radar import BevFeatureNet, BevFeatureNetConfig, RadarSweep, bev_feature_net, radar_grid_map
from .tensor import no_grad, ops
from .tensor.gradcheck import check_gradients
from .view_transform import (
    LssPool,
    ViewTransformConfig,
    build_ring_ray,
    compressed_reference,
    matrixvt_transform,
)


@dataclass
class VtInstance:
    features: np.ndarray  # (N, C, h, w)
    depth: np.ndarray     # (N, D, h, w), softmax-normalized
    cameras: List[CameraModel]
    cfg: ViewTransformConfig


def random_vt_instance(rng: np.random.Generator, max_cams: int = 2, max_hw: int = 8, max_bins: int = 6,
                       max_cells: int = 16) -> VtInstance:
    """A small random view-transform problem with cameras looking over the grid."""
    n = int(rng.integers(1, max_cams + 1))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    d = int(rng.integers(1, max_bins + 1))
    c = int(rng.integers(1, 5))
    cells = int(rng.integers(4, max_cells + 1))
    cell = float(rng.choice([0.5, 1.0]))
    half = cells * cell / 2
    grid = BevGridSpec(-half, half, -half, half, cell)
    stride = 8
    cams = []
    for i in range(n):
        heading = float(rng.uniform(-math.pi, math.pi))
        pos = [float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(0.5, 2.0))]
        cams.append(mounted_camera(pos, heading, w * stride, h * stride, float(rng.uniform(60, 120)),
                                   pitch=float(rng.uniform(-0.2, 0.2))))
    cfg = ViewTransformConfig(grid, d_min=0.5, d_max=float(rng.uniform(2.0, max(2.5, 1.5 * half))), num_bins=d,
                              stride=stride)
    feats = rng.standard_normal((n, c, h, w))
    logits = rng.standard_normal((n, d, h, w))
    depth = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return VtInstance(feats, depth, cams, cfg)


def matrixvt_deviation(inst: VtInstance) -> float:
    """Max abs difference between MatrixVT and the compressed lift-splat path."""
    fast = matrixvt_transform(inst.features.astype(np.float32), inst.depth.astype(np.float32),
                              inst.cameras, inst.cfg).data
    ref = compressed_reference(inst.features, inst.depth, inst.cameras, inst.cfg)
    return float(np.max(np.abs(fast - ref)))


# ---------------------------------------------------------------------------
# suite plumbing
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    value: float          # the measured quantity (error, deviation, failure count)
    limit: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<40} {self.value:.3g} (limit {self.limit:g}, {self.seconds:.2f}s){extra}"


def _timed(name: str, limit: float, fn: Callable[[], Tuple[float, bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    value, ok, detail = fn()
    return CheckResult(name, float(value), limit, bool(ok), time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

GRAD_TOL = 1e-4
# central-difference step; truncation error at 1e-3 already reaches 1e-4 on the focal loss
GRAD_STEP = 1e-5


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _vt_grad_case(kind: str):
    inst = random_vt_instance(np.random.default_rng(11), max_cams=2, max_hw=3, max_bins=3, max_cells=6)
    if kind == "lss":
        pool = LssPool(inst.cameras, inst.cfg, *inst.features.shape[2:])
        fn = lambda f, d: pool(f, d)  # noqa: E731
    else:
        op = build_ring_ray(inst.cameras, inst.cfg, *inst.features.shape[2:])
        fn = lambda f, d: matrixvt_transform(f, d, inst.cameras, inst.cfg, op)  # noqa: E731
    return fn, lambda r: [r.standard_normal(inst.features.shape), _pos(r, inst.depth.shape)]


def _focal_case():
    y = np.clip(np.random.default_rng(1).uniform(-0.3, 1.0, (2, 5, 5)), 0, 1)
    y[0, 2, 2] = y[1, 0, 4] = 1.0
    return lambda p: gaussian_focal_loss(p, y), lambda r: [r.uniform(0.05, 0.95, (2, 5, 5))]


def _l1_case():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((R, 3, 3))
    mask = rng.random((3, 3)) > 0.4
    # offsets of +-0.5 keep every residual away from the kink at 0
    return (lambda p: regression_l1_loss(p, t, mask),
            lambda r: [t + np.random.default_rng(4).choice([-1, 1], t.shape) * 0.5])


# operator, input builder; inputs avoid kinks (relu at 0, argmax ties)
GRAD_CASES: Dict[str, Tuple[Callable, Callable]] = {
    "add": (lambda a, b: ops.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
    "sub": (lambda a, b: ops.sub(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (lambda a, b: ops.mul(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "div": (lambda a, b: ops.div(a, b), lambda r: [r.standard_normal((3, 4)), _pos(r, (3, 4))]),
    "scale": (lambda a: ops.scale(a, -2.5), lambda r: [r.standard_normal((5,))]),
    "power": (lambda a: ops.power(a, 2.0), lambda r: [_pos(r, (5,))]),
    "exp": (lambda a: ops.exp(a), lambda r: [r.standard_normal((5,))]),
    "log": (lambda a: ops.log(a), lambda r: [_pos(r, (5,))]),
    "sigmoid": (lambda a: ops.sigmoid(a), lambda r: [r.standard_normal((2, 5)) * 3]),
    "relu": (lambda a: ops.relu(a), lambda r: [np.sign(r.standard_normal((4, 4))) * _pos(r, (4, 4))]),
    "abs": (lambda a: ops.absolute(a), lambda r: [np.sign(r.standard_normal((6,))) * _pos(r, (6,))]),
    "clip": (lambda a: ops.clip(a, -1.0, 1.0), lambda r: [np.array([-3.0, -0.5, 0.2, 0.7, 2.5])]),
    "sum": (lambda a: ops.sum(a, axis=1), lambda r: [r.standard_normal((3, 4))]),
    "mean": (lambda a: ops.mean(a, axis=(0, 2)), lambda r: [r.standard_normal((2, 3, 4))]),
    "reshape": (lambda a: ops.reshape(a, (6, 2)), lambda r: [r.standard_normal((3, 4))]),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
    "getitem": (lambda a: a[1:, ::2], lambda r: [r.standard_normal((3, 4))]),
    "gather": (lambda a: a[np.array([0, 2, 2])], lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "split": (lambda a: ops.split(a, [1, 3], axis=1)[1] * 2.0, lambda r: [r.standard_normal((2, 4))]),
    "matmul": (lambda a, b: ops.matmul(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "softmax": (lambda a: ops.softmax(a, axis=1), lambda r: [r.standard_normal((3, 5))]),
    "max_over_axis": (lambda a: ops.max_over_axis(a, axis=1)[0],
                      lambda r: [np.arange(12.0).reshape(3, 4) @ np.diag([1, 3, 2, 0.5]) + r.uniform(0, 0.1, (3, 4))]),
    "where": (lambda a, b: ops.where(np.array([True, False, True]), a, b),
              lambda r: [r.standard_normal((3,)), r.standard_normal((3,))]),
    "segment_sum": (lambda a: ops.segment_sum(a, np.array([2, 0, -1, 2, 1]), 4),
                    lambda r: [r.standard_normal((5, 3))]),
    "scatter_rows": (lambda a: ops.scatter_rows(a, np.array([3, 0]), 5), lambda r: [r.standard_normal((2, 3))]),
    "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
               lambda r: [r.standard_normal((2, 3, 5, 5)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)]),
    "conv2d_1x1": (lambda x, w, b: ops.conv2d(x, w, b),
                   lambda r: [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 1, 1)), r.standard_normal(2)]),
    "batchnorm2d_train": (lambda x, g, b: ops.batchnorm2d(x, g, b, training=True),
                          lambda r: [r.standard_normal((3, 2, 3, 3)), _pos(r, (2,)), r.standard_normal(2)]),
    "batchnorm2d_eval": (lambda x, g, b: ops.batchnorm2d(x, g, b, np.array([0.1, -0.2]), np.array([1.5, 0.7]),
                                                         training=False),
                         lambda r: [r.standard_normal((2, 2, 3, 3)), _pos(r, (2,)), r.standard_normal(2)]),
    "lss_pool": _vt_grad_case("lss"),
    "matrixvt": _vt_grad_case("matrixvt"),
    "gaussian_focal_loss": _focal_case(),
    "regression_l1_loss": _l1_case(),
}


def gradient_suite(seed: int = 7) -> List[CheckResult]:
    out = []
    for name in sorted(GRAD_CASES):
        fn, build = GRAD_CASES[name]

        def run(fn=fn, build=build):
            err = check_gradients(fn, build(np.random.default_rng(seed)), h=GRAD_STEP)
            return err, err < GRAD_TOL, ""
        out.append(_timed(f"grad {name}", GRAD_TOL, run))
    return out


# ---------------------------------------------------------------------------
# equivalence: MatrixVT vs lift-splat, encoder invariants
# ---------------------------------------------------------------------------

MATRIXVT_TOL = 1e-5
ENCODER_GRID = BevGridSpec(-8.0, 8.0, -8.0, 8.0, 1.0)


def random_radar_points(rng: np.random.Generator, n: int, extent: float = 9.0) -> np.ndarray:
    """Aggregated points (x, y, rcs, v_d, dt), some outside ``ENCODER_GRID``."""
    return np.column_stack([
        rng.uniform(-extent, extent, n), rng.uniform(-extent, extent, n),
        rng.normal(5, 3, n), rng.normal(0, 4, n), rng.choice([0.0, 0.077, 0.154], n),
    ])


def grid_map_oracle(points: np.ndarray, grid: BevGridSpec) -> np.ndarray:
    """Per-point loop: count, max rcs, min v_d, max v_d per cell."""
    out = np.zeros((4, grid.H, grid.W))
    cells: Dict[Tuple[int, int], list] = {}
    for p in points:
        if not (grid.x_min <= p[0] < grid.x_max and grid.y_min <= p[1] < grid.y_max):
            continue
        r = int(math.floor((p[1] - grid.y_min) / grid.cell))
        c = int(math.floor((p[0] - grid.x_min) / grid.cell))
        cells.setdefault((r, c), []).append(p)
    for (r, c), pts in cells.items():
        a = np.array(pts)
        out[:, r, c] = [len(a), a[:, 2].max(), a[:, 3].min(), a[:, 3].max()]
    return out


def matrixvt_check(instances: int = 200, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = max(matrixvt_deviation(random_vt_instance(rng)) for _ in range(instances))
        return worst, worst < MATRIXVT_TOL, f"{instances} instances"
    return _timed("matrixvt vs lift-splat max abs dev", MATRIXVT_TOL, run)


def grid_map_check(clouds: int = 100, seed: int = 1) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        bad = 0
        for _ in range(clouds):
            pts = random_radar_points(rng, int(rng.integers(0, 300)))
            oracle = grid_map_oracle(pts, ENCODER_GRID).astype(np.float32)
            if not np.array_equal(radar_grid_map(pts, ENCODER_GRID).data, oracle):
                bad += 1
        return bad, bad == 0, f"{clouds} clouds"
    return _timed("grid map vs brute force (mismatches)", 0, run)


def permutation_check(clouds: int = 100, seed: int = 2) -> CheckResult:
    """Shuffling points never changes the pillar features, bit for bit.

    ``max_cells`` exceeds the 256 grid cells so no cell subsampling occurs,
    and at most 40 points keep per-cell counts below ``max_points`` sampling
    only when a cell is crowded; both samplers are order-independent anyway.
    """
    def run():
        rng = np.random.default_rng(seed)
        cfg = BevFeatureNetConfig(grid=ENCODER_GRID, max_cells=300, max_points=10, channels=8)
        net = BevFeatureNet(cfg, rng=np.random.default_rng(9)).eval()
        bad = 0
        with no_grad():
            for _ in range(clouds):
                pts = random_radar_points(rng, int(rng.integers(1, 200)), extent=7.9)
                ref = bev_feature_net(pts, cfg, net).data
                perm = rng.permutation(len(pts))
                if not np.array_equal(ref, bev_feature_net(pts[perm], cfg, net).data):
                    bad += 1
        return bad, bad == 0, f"{clouds} clouds"
    return _timed("pillar permutation invariance (mismatches)", 0, run)


def equivalence_suite() -> List[CheckResult]:
    return [matrixvt_check(), grid_map_check(), permutation_check()]


# ---------------------------------------------------------------------------
# round trips: box encode/decode, sweep files
# ---------------------------------------------------------------------------

ROUNDTRIP_GRID = BevGridSpec(-16.0, 16.0, -16.0, 16.0, 1.0)


def random_frame(rng: np.random.Generator, n_max: int = 10, grid: BevGridSpec = ROUNDTRIP_GRID,
                 num_classes: int = 3) -> List[Box3D]:
    """Up to ``n_max`` boxes whose centers are at least 2 cells apart."""
    boxes: List[Box3D] = []
    for _ in range(int(rng.integers(0, n_max + 1))):
        for _ in range(100):
            c = rng.uniform([grid.x_min + 0.01, grid.y_min + 0.01], [grid.x_max - 0.01, grid.y_max - 0.01])
            if all(np.hypot(*(c - b.center[:2])) > 2 * grid.cell for b in boxes):
                break
        else:
            continue
        boxes.append(Box3D([c[0], c[1], rng.uniform(0.5, 1.5)], rng.uniform(0.5, 6.0, 3),
                           rng.uniform(-math.pi, math.pi), rng.normal(0, 5, 2), class_id=int(rng.integers(num_classes))))
    return boxes


def roundtrip_errors(boxes: Sequence[Box3D], grid: BevGridSpec = ROUNDTRIP_GRID,
                     num_classes: int = 3) -> Tuple[float, float, float, int]:
    """Worst center (m), relative size and yaw errors, and the count mismatch."""
    t = make_targets(boxes, grid, num_classes)
    dets = decode(t.heatmap, t.regression, grid, DecodeConfig(score_thresh=0.99, max_dets=100))
    worst = [0.0, 0.0, 0.0]
    for b in boxes:
        if not dets:
            return math.inf, math.inf, math.inf, len(boxes)
        d = min(dets, key=lambda d: np.hypot(*(d.center[:2] - b.center[:2])) + 100 * (d.class_id != b.class_id))
        worst[0] = max(worst[0], float(np.abs(d.center[:2] - b.center[:2]).max()))
        worst[1] = max(worst[1], float(np.max(np.abs(d.size - b.size) / b.size)))
        worst[2] = max(worst[2], abs(math.remainder(d.yaw - b.yaw, 2 * math.pi)))
    return worst[0], worst[1], worst[2], abs(len(dets) - len(boxes))


def box_roundtrip_check(frames: int = 100, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = np.zeros(4)
        for _ in range(frames):
            worst = np.maximum(worst, roundtrip_errors(random_frame(rng)))
        half = 0.5 * ROUNDTRIP_GRID.cell
        ok = worst[0] <= half and worst[1] < 1e-3 and worst[2] < 1e-3 and worst[3] == 0
        detail = f"center {worst[0]:.3g} m, size {worst[1]:.2g}, yaw {worst[2]:.2g} rad, count diff {int(worst[3])}"
        return worst[0] / half, ok, detail
    return _timed("encode/decode center err / half cell", 1.0, run)


def sweep_roundtrip_check(sweeps: int = 50, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        bad = 0
        for _ in range(sweeps):
            pts = rng.normal(0, 10, (int(rng.integers(0, 200)), 4)).astype(np.float32)
            s = RadarSweep(int(rng.integers(0, 2**62)), pts)
            buf = encode_sweep(s)
            back = decode_sweep(buf)
            if back.timestamp_us != s.timestamp_us or back.points.tobytes() != pts.tobytes() or encode_sweep(back) != buf:
                bad += 1
        return bad, bad == 0, f"{sweeps} sweeps"
    return _timed("sweep file round trip (mismatches)", 0, run)


def sweep_fuzz_check(cases: int = 1000, seed: int = 0) -> CheckResult:
    """Truncated, bit-flipped and random buffers must raise ``SweepFormatError`` only."""
    def run():
        rng = np.random.default_rng(seed)
        base = encode_sweep(RadarSweep(42, rng.normal(0, 5, (8, 4)).astype(np.float32)))
        untyped = 0
        for i in range(cases):
            kind = i % 3
            if kind == 0:
                buf = base[:int(rng.integers(0, len(base)))]
            elif kind == 1:
                b = bytearray(base)
                for pos in rng.integers(0, 20, int(rng.integers(1, 4))):
                    b[pos] ^= 1 << int(rng.integers(8))
                buf = bytes(b)
            else:
                buf = rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
            try:
                decode_sweep(buf)
            except SweepFormatError:
                pass
            except Exception:  # noqa: BLE001 - anything untyped is the failure being counted
                untyped += 1
        return untyped, untyped == 0, f"{cases} cases"
    return _timed("sweep fuzz untyped errors", 0, run)


def roundtrip_suite() -> List[CheckResult]:
    return [box_roundtrip_check(), sweep_roundtrip_check(), sweep_fuzz_check()]


# ---------------------------------------------------------------------------
# metrics: NDS of published rows
# ---------------------------------------------------------------------------

def metrics_suite() -> List[CheckResult]:
    out = []
    for row, value, ok in check_published_rows():
        out.append(CheckResult(f"nds {row.table}: {row.name}", abs(value - row.nds), NDS_TOLERANCE, ok,
                               detail=f"computed {value:.4f} reported {row.nds:.3f}"))
    return out


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "gradients": gradient_suite,
    "equivalence": equivalence_suite,
    "roundtrip": roundtrip_suite,
    "metrics": metrics_suite,
}


def run_suite(name: str) -> List[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()
