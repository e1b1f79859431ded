import math

import numpy as np
import pytest

from bevfuse.checks import matrixvt_deviation, random_vt_instance
from bevfuse.geometry import BevGridSpec, mounted_camera
from bevfuse.tensor import Tensor
from bevfuse.tensor.gradcheck import check_gradients
from bevfuse.view_transform import (
    DepthHead,
    LiftedPoints,
    LssPool,
    ViewTransformConfig,
    build_ring_ray,
    compressed_reference,
    depth_head,
    lift,
    lss_pool,
    matrixvt_transform,
    pixel_centers,
    splat,
    _cell_table,
)

GRID = BevGridSpec(-8.0, 8.0, -8.0, 8.0, 1.0)


def front_camera(w=4, h=2):
    return mounted_camera([0.0, 0.0, 1.0], 0.0, 8 * w, 8 * h, 90.0)


class TestLift:
    def test_single_bin_unscaled(self):
        cfg = ViewTransformConfig(GRID, d_min=1.0, d_max=7.0, num_bins=1)
        feats = np.random.default_rng(0).standard_normal((1, 3, 2, 4))
        rec = lift(feats, np.ones((1, 1, 2, 4)), [front_camera()], cfg)
        assert rec.positions.shape == (8, 3)
        np.testing.assert_allclose(rec.features, feats[0].reshape(3, -1).T)

    def test_uniform_depth_scales(self):
        cfg = ViewTransformConfig(GRID, d_min=1.0, d_max=7.0, num_bins=4)
        feats = np.random.default_rng(1).standard_normal((1, 2, 2, 4))
        rec = lift(feats, np.full((1, 4, 2, 4), 0.25), [front_camera()], cfg)
        per_bin = rec.features.reshape(4, 8, 2)
        for d in range(4):
            np.testing.assert_allclose(per_bin[d], feats[0].reshape(2, -1).T / 4)

    def test_positions_vs_pixel_oracle(self):
        cam = mounted_camera([1.0, -0.5, 1.5], 0.4, 64, 32, 80.0, pitch=0.1)
        cfg = ViewTransformConfig(GRID, d_min=1.0, d_max=9.0, num_bins=3)
        rec = lift(np.ones((1, 1, 4, 8)), np.ones((1, 3, 4, 8)) / 3, [cam], cfg)
        u, v = pixel_centers(4, 8, 8)
        kinv = np.linalg.inv(cam.intrinsics)
        r, t = cam.extrinsics[:3, :3], cam.extrinsics[:3, 3]
        k = 0
        for d in cfg.bin_centers:
            for vv in v:
                for uu in u:
                    ray = kinv @ np.array([uu, vv, 1.0])
                    expected = r @ (ray * d) + t
                    np.testing.assert_allclose(rec.positions[k], expected, atol=1e-6)
                    k += 1

    def test_shape_mismatch(self):
        cfg = ViewTransformConfig(GRID, num_bins=3)
        with pytest.raises(ValueError):
            lift(np.zeros((1, 2, 2, 4)), np.zeros((1, 4, 2, 4)), [front_camera()], cfg)

    def test_optical_axis_lands_in_expected_cell(self):
        # single central pixel, all mass in bin 2 (center 6 m) -> cell containing (6, 0)
        cam = mounted_camera([0.0, 0.0, 1.0], 0.0, 8, 8, 90.0)
        cfg = ViewTransformConfig(GRID, d_min=1.0, d_max=7.0, num_bins=3)
        depth = np.zeros((1, 3, 1, 1))
        depth[0, 2] = 1.0
        bev = splat(lift(np.ones((1, 1, 1, 1)), depth, [cam], cfg), GRID)
        assert bev[0, 8, 14] == 1.0 and bev.sum() == 1.0


class TestSplat:
    def test_single_record(self):
        rec = LiftedPoints(np.array([[0.5, 0.5, 0.0]]), np.array([[2.0, -1.0]]))
        bev = splat(rec, GRID)
        np.testing.assert_array_equal(bev[:, 8, 8], [2.0, -1.0])
        assert np.count_nonzero(bev) == 2

    def test_same_cell_sums(self):
        rec = LiftedPoints(np.array([[0.1, 0.2, 0], [0.9, 0.7, 5]]), np.array([[1.0], [3.0]]))
        assert splat(rec, GRID)[0, 8, 8] == 4.0

    def test_random_vs_scatter_oracle(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(-10, 10, (10_000, 3))
        feats = rng.standard_normal((10_000, 4))
        bev, dropped = splat(LiftedPoints(pos, feats), GRID, return_dropped=True)
        oracle = np.zeros((4, 16, 16))
        outside = 0
        for p, f in zip(pos, feats):
            if -8 <= p[0] < 8 and -8 <= p[1] < 8:
                oracle[:, int(math.floor(p[1] + 8)), int(math.floor(p[0] + 8))] += f
            else:
                outside += 1
        assert np.max(np.abs(bev - oracle)) < 1e-5
        assert dropped == outside

    def test_conservation(self):
        rng = np.random.default_rng(4)
        pos = rng.uniform(-7.9, 7.9, (500, 3))
        feats = rng.standard_normal((500, 3))
        np.testing.assert_allclose(splat(LiftedPoints(pos, feats), GRID).sum(axis=(1, 2)), feats.sum(axis=0),
                                   atol=1e-9)


class TestLssPool:
    def test_matches_lift_splat(self):
        rng = np.random.default_rng(5)
        cams = [front_camera(6, 3), mounted_camera([0, 0, 1.0], math.pi, 48, 24, 100.0)]
        cfg = ViewTransformConfig(GRID, d_min=1.0, d_max=9.0, num_bins=4)
        feats = rng.standard_normal((2, 3, 3, 6))
        depth = rng.dirichlet(np.ones(4), size=(2, 3, 6)).transpose(0, 3, 1, 2)
        pool = LssPool(cams, cfg, 3, 6)
        got = pool(Tensor(feats), Tensor(depth)).data
        np.testing.assert_allclose(got, splat(lift(feats, depth, cams, cfg), GRID), atol=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        cams = [front_camera(3, 2)]
        cfg = ViewTransformConfig(BevGridSpec(-4, 4, -4, 4, 1.0), d_min=1.0, d_max=5.0, num_bins=3)
        cells = _cell_table(cams, cfg, 2, 3)
        err = check_gradients(lambda f, d: lss_pool(f, d, cells, cfg.grid),
                              [rng.standard_normal((1, 2, 2, 3)), rng.uniform(0.1, 1, (1, 3, 2, 3))])
        assert err < 1e-4


class TestMatrixVT:
    def test_single_row_equals_lift_splat(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            inst = random_vt_instance(rng)
            f, d = inst.features[:, :, :1], inst.depth[:, :, :1]
            fast = matrixvt_transform(f.astype(np.float32), d.astype(np.float32), inst.cameras, inst.cfg).data
            naive = splat(lift(f, d, inst.cameras, inst.cfg), inst.cfg.grid)
            assert np.max(np.abs(fast - naive)) < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_random_equals_compressed_reference(self, seed):
        assert matrixvt_deviation(random_vt_instance(np.random.default_rng(100 + seed))) < 1e-5

    def test_zero_features(self):
        inst = random_vt_instance(np.random.default_rng(8))
        out = matrixvt_transform(np.zeros_like(inst.features), inst.depth, inst.cameras, inst.cfg).data
        assert not out.any()

    def test_nontrivial_coverage(self):
        # the random instances should actually put mass on the grid
        hit = 0
        rng = np.random.default_rng(9)
        for _ in range(30):
            inst = random_vt_instance(rng)
            hit += np.abs(compressed_reference(inst.features, inst.depth, inst.cameras, inst.cfg)).sum() > 0
        assert hit >= 20

    def test_operator_reuse_and_geometry_check(self):
        inst = random_vt_instance(np.random.default_rng(10))
        n, _, h, w = inst.features.shape
        op = build_ring_ray(inst.cameras, inst.cfg, h, w)
        a = matrixvt_transform(inst.features, inst.depth, inst.cameras, inst.cfg, operator=op).data
        b = matrixvt_transform(inst.features, inst.depth, inst.cameras, inst.cfg).data
        np.testing.assert_array_equal(a, b)
        bad = build_ring_ray(inst.cameras, inst.cfg, h, w + 1)
        with pytest.raises(ValueError):
            matrixvt_transform(inst.features, inst.depth, inst.cameras, inst.cfg, operator=bad)

    def test_gradients(self):
        inst = random_vt_instance(np.random.default_rng(11), max_hw=4, max_bins=3)
        err = check_gradients(lambda f, d: matrixvt_transform(f, d, inst.cameras, inst.cfg),
                              [inst.features, inst.depth])
        assert err < 1e-4


class TestDepthHead:
    def test_zero_weights_uniform(self):
        head = DepthHead(4, 5, 3)
        head.depth_conv.weight.data[...] = 0
        head.depth_conv.bias.data[...] = 0
        out = depth_head(Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 3))), head).data
        np.testing.assert_allclose(out, 0.2, atol=1e-7)

    def test_sums_to_one(self):
        head = DepthHead(4, 6, 3, rng=np.random.default_rng(1))
        depth, ctx = head(Tensor(np.random.default_rng(2).standard_normal((1, 4, 5, 5)) * 3))
        np.testing.assert_allclose(depth.data.sum(axis=1), 1.0, atol=1e-5)
        assert ctx.shape == (1, 3, 5, 5)

    def test_gradient(self):
        head = DepthHead(3, 4, 2, rng=np.random.default_rng(3))
        w = head.depth_conv.weight.data.astype(np.float64)
        from bevfuse.tensor import ops

        err = check_gradients(lambda x, wt: ops.softmax(ops.conv2d(x, wt), axis=1),
                              [np.random.default_rng(4).standard_normal((1, 3, 3, 3)), w])
        assert err < 1e-4
