import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevfuse.geometry import BevGridSpec, Box3D
from bevfuse.head import (
    R,
    AttributeLookup,
    CenterHead,
    DecodeConfig,
    DetectionSet,
    LossConfig,
    TargetConfig,
    decode,
    draw_gaussian,
    gaussian_focal_loss,
    gaussian_patch,
    gaussian_radius,
    make_targets,
    regression_l1_loss,
)
from bevfuse.tensor import Tensor
from bevfuse.tensor.gradcheck import check_gradients

GRID = BevGridSpec(-16.0, 16.0, -16.0, 16.0, 1.0)


def random_frame(rng, n_max=10, grid=GRID, num_classes=3):
    """Up to ``n_max`` boxes whose centers are at least 2 cells apart."""
    boxes = []
    for _ in range(int(rng.integers(0, n_max + 1))):
        for _ in range(100):
            c = rng.uniform([grid.x_min + 0.01, grid.y_min + 0.01], [grid.x_max - 0.01, grid.y_max - 0.01])
            if all(np.hypot(*(c - b.center[:2])) > 2 * grid.cell for b in boxes):
                break
        else:
            continue
        boxes.append(Box3D([c[0], c[1], rng.uniform(0.5, 1.5)], rng.uniform(0.5, 6.0, 3), rng.uniform(-math.pi, math.pi),
                           rng.normal(0, 5, 2), class_id=int(rng.integers(num_classes))))
    return boxes


class TestTargets:
    def test_no_boxes(self):
        t = make_targets([], GRID, 3)
        assert not t.heatmap.any() and t.num_objects == 0 and not t.mask.any()

    def test_centered_box_symmetry(self):
        box = Box3D([0.5, 0.5, 1.0], [2.0, 4.0, 1.5], 0.0)
        t = make_targets([box], GRID, 3)
        hm = t.heatmap[0]
        assert hm[16, 16] == 1.0
        n = [hm[15, 16], hm[17, 16], hm[16, 15], hm[16, 17]]
        assert len(set(n)) == 1 and 0 < n[0] < 1
        assert (hm == 1.0).sum() == 1

    def test_overlapping_same_class_is_max(self):
        a = Box3D([0.5, 0.5, 1.0], [3.0, 5.0, 1.5], 0.0)
        b = Box3D([2.5, 1.5, 1.0], [3.0, 5.0, 1.5], 0.0)
        t = make_targets([a, b], GRID, 3, TargetConfig(min_radius=3))
        ga, gb = np.zeros((32, 32)), np.zeros((32, 32))
        ra = max(3, int(gaussian_radius(5.0, 3.0, 0.1)))
        draw_gaussian(ga, 16, 16, ra)
        draw_gaussian(gb, 17, 18, ra)
        np.testing.assert_allclose(t.heatmap[0], np.maximum(ga, gb), atol=1e-7)

    def test_out_of_grid_skipped(self):
        t = make_targets([Box3D([30.0, 0.0, 1.0], [1, 1, 1], 0.0)], GRID, 3)
        assert t.skipped == 1 and t.num_objects == 0

    def test_bad_class(self):
        with pytest.raises(ValueError):
            make_targets([Box3D([0, 0, 0], [1, 1, 1], 0.0, class_id=5)], GRID, 3)

    def test_gaussian_monotone_along_axes(self):
        g = gaussian_patch(4)
        assert (np.diff(g[4, 4:]) < 0).all() and (np.diff(g[4:, 4]) < 0).all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_peak_count_equals_objects(self, seed):
        boxes = random_frame(np.random.default_rng(seed))
        t = make_targets(boxes, GRID, 3)
        assert int((t.heatmap == 1.0).sum()) == t.num_objects == len(boxes)
        assert t.heatmap.max() <= 1.0


class TestFocalLoss:
    def test_perfect_prediction(self):
        y = np.zeros((1, 4, 4))
        y[0, 1, 2] = 1.0
        p = np.where(y == 1, 1.0, 0.0)
        loss = gaussian_focal_loss(Tensor(p), y).item()
        assert loss == pytest.approx(0.0, abs=1e-10)

    def test_hand_value(self):
        loss = gaussian_focal_loss(Tensor(np.array([[[0.5]]])), np.array([[[1.0]]]), LossConfig(alpha=2)).item()
        assert loss == pytest.approx(0.25 * math.log(2), abs=1e-6)
        assert loss == pytest.approx(0.1733, abs=1e-4)

    def test_negative_cell_value(self):
        # y = 0.5, p = 0.2: -(0.5^4)(0.2^2) log(0.8), normalized by N_o = 1 guard
        loss = gaussian_focal_loss(Tensor(np.array([[[0.2]]])), np.array([[[0.5]]])).item()
        assert loss == pytest.approx(-(0.5 ** 4) * 0.04 * math.log(0.8), rel=1e-9)

    def test_normalized_by_objects(self):
        y = np.zeros((1, 2, 2))
        y[0, 0, 0] = y[0, 1, 1] = 1.0
        p = np.full((1, 2, 2), 0.5)
        one = -(0.25 * math.log(0.5))
        neg = -(0.25 * math.log(0.5))
        assert gaussian_focal_loss(Tensor(p), y).item() == pytest.approx((2 * one + 2 * neg) / 2)

    def test_clamped_extremes_finite(self):
        y = np.array([[[1.0, 0.0]]])
        loss = gaussian_focal_loss(Tensor(np.array([[[0.0, 1.0]]])), y).item()
        assert np.isfinite(loss) and loss > 0

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = make_targets(random_frame(rng), GRID, 3).heatmap
            assert gaussian_focal_loss(Tensor(rng.uniform(0.01, 0.99, y.shape)), y).item() >= 0

    def test_gradient(self):
        rng = np.random.default_rng(1)
        y = np.clip(rng.uniform(-0.3, 1.0, (2, 5, 5)), 0, 1)
        y[0, 2, 2] = y[1, 0, 4] = 1.0
        err = check_gradients(lambda p: gaussian_focal_loss(p, y), [rng.uniform(0.05, 0.95, (2, 5, 5))])
        assert err < 1e-4


class TestL1Loss:
    def test_zero(self):
        t = np.random.default_rng(0).standard_normal((R, 4, 4))
        mask = np.zeros((4, 4), bool)
        mask[1, 1] = True
        assert regression_l1_loss(Tensor(t), t, mask).item() == 0.0

    def test_single_channel_off_by_two(self):
        t = np.zeros((R, 4, 4))
        pred = t.copy()
        pred[3, 2, 2] = 2.0
        mask = np.zeros((4, 4), bool)
        mask[2, 2] = True
        assert regression_l1_loss(Tensor(pred), t, mask).item() == pytest.approx(2.0 / R)

    def test_empty_mask(self):
        assert regression_l1_loss(Tensor(np.ones((R, 2, 2))), np.zeros((R, 2, 2)), np.zeros((2, 2), bool)).item() == 0

    def test_subgradient(self):
        rng = np.random.default_rng(2)
        pred = Tensor(rng.standard_normal((R, 3, 3)), requires_grad=True)
        t = rng.standard_normal((R, 3, 3))
        mask = np.zeros((3, 3), bool)
        mask[0, 1] = mask[2, 2] = True
        regression_l1_loss(pred, t, mask).backward()
        expected = np.sign(pred.data - t) * mask[None] / (2 * R)
        np.testing.assert_allclose(pred.grad, expected)

    def test_channel_weights(self):
        t = np.zeros((R, 4, 4))
        pred = t.copy()
        pred[6, 1, 1] = 1.0
        pred[0, 1, 1] = 1.0
        mask = np.zeros((4, 4), bool)
        mask[1, 1] = True
        w = np.ones(R)
        w[6] = 3.0
        assert regression_l1_loss(Tensor(pred), t, mask, w).item() == pytest.approx(4.0 / R)
        with pytest.raises(ValueError, match="channel_weights"):
            regression_l1_loss(Tensor(pred), t, mask, np.ones(3))

    def test_gradient_fd(self):
        rng = np.random.default_rng(3)
        t = rng.standard_normal((R, 3, 3))
        mask = rng.random((3, 3)) > 0.4
        err = check_gradients(lambda p: regression_l1_loss(p, t, mask), [t + rng.choice([-1, 1], t.shape) * 0.5])
        assert err < 1e-4


def roundtrip_errors(boxes, grid=GRID):
    t = make_targets(boxes, grid, 3)
    dets = decode(t.heatmap, t.regression, grid, DecodeConfig(score_thresh=0.99, max_dets=100))
    assert len(dets) == len(boxes)
    worst = [0.0, 0.0, 0.0]
    for b in boxes:
        d = min(dets, key=lambda d: np.hypot(*(d.center[:2] - b.center[:2])) + 100 * (d.class_id != b.class_id))
        worst[0] = max(worst[0], float(np.abs(d.center[:2] - b.center[:2]).max()))
        worst[1] = max(worst[1], float(np.max(np.abs(d.size - b.size) / b.size)))
        worst[2] = max(worst[2], abs(math.remainder(d.yaw - b.yaw, 2 * math.pi)))
    return worst


class TestDecode:
    def test_empty_heatmap(self):
        assert decode(np.zeros((3, 8, 8)), np.zeros((R, 8, 8)), GRID) == []

    def test_max_dets_keeps_best(self):
        hm = np.zeros((3, 32, 32))
        hm[0, 5, 5] = 0.6
        hm[1, 20, 20] = 0.9
        dets = decode(hm, np.zeros((R, 32, 32)), GRID, DecodeConfig(max_dets=1))
        assert len(dets) == 1 and dets[0].class_id == 1 and dets[0].score == pytest.approx(0.9)

    def test_peak_rule_suppresses_neighbors(self):
        hm = np.zeros((1, 32, 32))
        hm[0, 10, 10] = 0.8
        hm[0, 10, 11] = 0.7
        hm[0, 10, 13] = 0.5
        dets = decode(hm, np.zeros((R, 32, 32)), GRID, DecodeConfig(score_thresh=0.1))
        assert sorted(d.score for d in dets) == pytest.approx([0.5, 0.8])

    def test_roundtrip_single(self):
        box = Box3D([3.3, -7.6, 0.8], [1.9, 4.6, 1.7], 2.5, velocity=[4.0, -1.0], class_id=2)
        pos, dims, yaw = roundtrip_errors([box])
        assert pos < 1e-5 and dims < 1e-5 and yaw < 1e-5

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_roundtrip_random(self, seed):
        pos, dims, yaw = roundtrip_errors(random_frame(np.random.default_rng(seed)))
        assert pos <= 0.5 * GRID.cell and dims < 1e-3 and yaw < 1e-3


class TestHeadModule:
    def test_output_ranges(self):
        head = CenterHead(8, 3, hidden=8, rng=np.random.default_rng(0))
        out = head(Tensor(np.random.default_rng(1).standard_normal((2, 8, 6, 6)).astype(np.float32)))
        assert out.heatmap.shape == (2, 3, 6, 6) and out.regression.shape == (2, R, 6, 6)
        assert ((out.heatmap.data > 0) & (out.heatmap.data < 1)).all()


class TestAttributes:
    def test_lookup(self):
        boxes = [Box3D([0, 0, 0], [1, 1, 1], 0, velocity=[3, 0], class_id=0, attribute_id=1)] * 3 + \
                [Box3D([0, 0, 0], [1, 1, 1], 0, class_id=0, attribute_id=2)] * 2
        lut = AttributeLookup.fit(boxes)
        assert lut(0, [2.0, 0.0]) == 1 and lut(0, [0.0, 0.0]) == 2
        assert lut(7, [0, 0]) == 0
        assert AttributeLookup.from_dict(lut.to_dict()) == lut


class TestDetectionSetIO:
    def test_roundtrip(self, tmp_path):
        ds = DetectionSet(("car", "pedestrian", "truck"))
        ds.add("s1", [Box3D([1, 2, 0.5], [2, 4, 1.5], 0.3, [1, 0], class_id=2, attribute_id=1, score=0.75)])
        ds.add("s0", [Box3D([0, 0, 0], [1, 1, 1], 0.0, class_id=1, score=0.2)])
        ds.write(tmp_path / "d.jsonl")
        back = DetectionSet.read(tmp_path / "d.jsonl", ds.class_names)
        assert len(back) == 2
        b = back.detections["s1"][0]
        assert b.class_id == 2 and b.score == 0.75 and b.attribute_id == 1
        lines = (tmp_path / "d.jsonl").read_text().splitlines()
        assert '"class_name": "pedestrian"' in lines[0]

    def test_bad_record(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"sample_id": "a", "class_name": "bus"}\n')
        with pytest.raises(ValueError, match="d.jsonl:1"):
            DetectionSet.read(tmp_path / "d.jsonl", ("car",))
