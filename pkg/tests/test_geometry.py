import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevfuse.geometry import (
    AugmentParams,
    BevGridSpec,
    Box3D,
    CameraModel,
    augment3d,
    ego_to_bev_cell,
    load_calibration,
    mounted_camera,
    normalize_yaw,
    project_to_image,
    save_calibration,
    warp_bev_indices,
)

GRID = BevGridSpec(-40.0, 40.0, -40.0, 40.0, 0.4)


def identity_camera(fx=100.0, cx=50.0, cy=50.0):
    k = np.array([[fx, 0, cx], [0, fx, cy], [0, 0, 1.0]])
    return CameraModel(k, np.eye(4), 100, 100)


class TestProjection:
    def test_optical_axis(self):
        cam = mounted_camera([1.0, 0.5, 1.6], 0.3, 704, 256, 70.0)
        axis_point = cam.camera_to_ego(np.array([[0.0, 0.0, 12.0]]))[0]
        u, v, d = project_to_image(axis_point, cam)
        assert u == pytest.approx(cam.cx) and v == pytest.approx(cam.cy) and d == pytest.approx(12.0)

    def test_pinhole_formula(self):
        u, _, _ = project_to_image([1.0, 0.0, 10.0], identity_camera())
        assert u == pytest.approx(60.0)

    def test_behind_camera_marker(self):
        assert project_to_image([0.0, 0.0, -1.0], identity_camera()) is None

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        cam = mounted_camera([1.5, -0.2, 1.5], -2.0, 704, 256, 90.0, pitch=0.05)
        pts_cam = np.column_stack([rng.uniform(-10, 10, 1000), rng.uniform(-3, 3, 1000), rng.uniform(1, 60, 1000)])
        pts = cam.camera_to_ego(pts_cam)
        u, v, d, ok = cam.project(pts)
        assert ok.all()
        np.testing.assert_allclose(cam.unproject(u, v, d), pts, atol=1e-6)

    def test_invalid_camera(self):
        with pytest.raises(ValueError):
            CameraModel(np.diag([-1.0, 1.0, 1.0]), np.eye(4), 10, 10)
        ext = np.eye(4)
        ext[0, 0] = 2.0
        with pytest.raises(ValueError, match="orthonormal"):
            CameraModel(np.eye(3), ext, 10, 10)

    def test_calibration_json(self, tmp_path):
        cams = {"front": mounted_camera([1, 0, 1.5], 0.0, 88, 32, 100.0)}
        save_calibration(cams, tmp_path / "calib.json")
        back = load_calibration(tmp_path / "calib.json")
        np.testing.assert_allclose(back["front"].intrinsics, cams["front"].intrinsics)
        np.testing.assert_allclose(back["front"].extrinsics, cams["front"].extrinsics)


class TestBevCells:
    def test_corner(self):
        assert ego_to_bev_cell(-40.0, -40.0, GRID) == (0, 0)

    def test_center(self):
        assert ego_to_bev_cell(0.0, 0.0, GRID) == (100, 100)

    def test_upper_boundary_outside(self):
        assert ego_to_bev_cell(40.0, 0.0, GRID) is None
        assert ego_to_bev_cell(0.0, 40.0, GRID) is None

    def test_random_points_vs_arithmetic(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-45, 45, (10_000, 2))
        for x, y in pts:
            got = ego_to_bev_cell(x, y, GRID)
            if -40 <= x < 40 and -40 <= y < 40:
                expected = (int(math.floor((y + 40) / 0.4)), int(math.floor((x + 40) / 0.4)))
                assert got == expected
                assert 0 <= got[0] < GRID.H and 0 <= got[1] < GRID.W
            else:
                assert got is None

    def test_indivisible_extent(self):
        with pytest.raises(ValueError):
            BevGridSpec(0.0, 1.0, 0.0, 1.0, 0.3)


class TestBoxes:
    def test_yaw_normalized(self):
        assert normalize_yaw(math.pi) == pytest.approx(math.pi)
        assert normalize_yaw(-math.pi) == pytest.approx(math.pi)
        assert normalize_yaw(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_nonpositive_size(self):
        with pytest.raises(ValueError):
            Box3D([0, 0, 0], [1, 0, 1], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(0.3, 10), st.floats(0.3, 10), st.floats(0.3, 5))
    def test_corner_edges_equal_size(self, yaw, w, l, h):
        c = Box3D([1.0, -2.0, 0.5], [w, l, h], yaw).corners()
        assert np.linalg.norm(c[0] - c[1]) == pytest.approx(l, abs=1e-6)
        assert np.linalg.norm(c[1] - c[2]) == pytest.approx(w, abs=1e-6)
        assert np.linalg.norm(c[0] - c[4]) == pytest.approx(h, abs=1e-6)


class TestAugment:
    def _sample(self, seed=0):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(-20, 20, (30, 2)), rng.normal(5, 2, 30), rng.normal(0, 3, 30),
                               np.zeros(30)])
        boxes = [Box3D(rng.uniform(-20, 20, 3), rng.uniform(1, 4, 3), rng.uniform(-3, 3), rng.normal(0, 4, 2),
                       class_id=i % 3) for i in range(5)]
        return pts, boxes

    def test_identity(self):
        pts, boxes = self._sample()
        res = augment3d(pts, boxes, AugmentParams())
        np.testing.assert_array_equal(res.points, pts)
        for a, b in zip(res.boxes, boxes):
            np.testing.assert_allclose(a.center, b.center)
            assert a.yaw == pytest.approx(b.yaw)
        np.testing.assert_array_equal(res.bev_transform, np.eye(2))

    def test_flip_x(self):
        box = Box3D([3.0, 5.0, 0.0], [1, 2, 1], 0.2, velocity=[1.5, -0.5])
        out = augment3d(np.zeros((0, 5)), [box], AugmentParams(flip_x=True)).boxes[0]
        np.testing.assert_allclose(out.center, [-3.0, 5.0, 0.0])
        assert out.yaw == pytest.approx(normalize_yaw(math.pi - 0.2))
        np.testing.assert_allclose(out.velocity, [-1.5, -0.5])

    def test_rotation_round_trip(self):
        pts, boxes = self._sample(3)
        fwd = augment3d(pts, boxes, AugmentParams(rot=0.7))
        back = augment3d(fwd.points, fwd.boxes, AugmentParams(rot=-0.7))
        np.testing.assert_allclose(back.points, pts, atol=1e-6)
        for a, b in zip(back.boxes, boxes):
            np.testing.assert_allclose(a.center, b.center, atol=1e-6)
            np.testing.assert_allclose(a.velocity, b.velocity, atol=1e-6)
            assert abs(normalize_yaw(a.yaw - b.yaw)) < 1e-6

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            augment3d(np.zeros((0, 5)), [], AugmentParams(scale=0.0))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.booleans(), st.booleans())
    def test_distances_preserved(self, rot, fx, fy):
        pts, boxes = self._sample(5)
        out = augment3d(pts, boxes, AugmentParams(rot=rot, flip_x=fx, flip_y=fy)).points
        d0 = np.linalg.norm(pts[:, None, :2] - pts[None, :, :2], axis=-1)
        d1 = np.linalg.norm(out[:, None, :2] - out[None, :, :2], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-6)

    def test_box_points_follow_boxes(self):
        box = Box3D([5.0, 3.0, 0.0], [2, 4, 1.5], 0.4)
        inside = box.center[:2] + np.array([[0.5, 0.2], [-1.0, 0.3]])
        pts = np.column_stack([inside, np.zeros((2, 3))])
        res = augment3d(pts, [box], AugmentParams(rot=1.1, scale=1.05, flip_y=True))
        assert res.boxes[0].contains_bev(res.points[:, :2]).all()

    def test_bev_warp_matches_point_transform(self):
        grid = BevGridSpec(-8, 8, -8, 8, 1.0)
        params = AugmentParams(flip_x=True)
        src, valid = warp_bev_indices(grid, params.matrix())
        assert valid.all()
        feat = np.arange(grid.H * grid.W, dtype=float)
        warped = np.where(valid, feat[src], 0).reshape(grid.shape)
        # flipping x mirrors columns
        np.testing.assert_array_equal(warped, feat.reshape(grid.shape)[:, ::-1])
