import numpy as np
import pytest

from bevfuse.fusion import (
    FULL_SIZE_LAYOUTS,
    BevEncoder,
    FusionConv,
    GridMismatchError,
    backbone_output_hw,
    bev_encoder,
    fuse,
    shape_table,
)
from bevfuse.geometry import BevGridSpec
from bevfuse.radar import RadarBackbone
from bevfuse.tensor import Tensor, ops
from bevfuse.tensor.gradcheck import check_gradients

GRID = BevGridSpec(-4.0, 4.0, -4.0, 4.0, 1.0)


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


class TestFuse:
    def test_identity_init_passes_camera(self):
        cam = rand((6, 8, 8))
        out = fuse(cam, Tensor(np.zeros((3, 8, 8), np.float32)), GRID, GRID, FusionConv(6, 3)).features
        np.testing.assert_array_equal(out.data, cam.data)

    def test_identity_init_ignores_radar(self):
        cam = rand((6, 8, 8))
        out = fuse(cam, rand((3, 8, 8), 1), GRID, GRID, FusionConv(6, 3)).features
        np.testing.assert_array_equal(out.data, cam.data)

    def test_zero_inputs_give_bias(self):
        layer = FusionConv(4, 2, rng=np.random.default_rng(0))
        layer.conv.bias.data[...] = [0.5, -1.0, 2.0, 0.0]
        out = fuse(Tensor(np.zeros((4, 8, 8), np.float32)), Tensor(np.zeros((2, 8, 8), np.float32)),
                   GRID, GRID, layer).features.data
        np.testing.assert_array_equal(out[:, 3, 5], [0.5, -1.0, 2.0, 0.0])
        assert (out == out[:, :1, :1]).all()

    def test_provenance_and_channels(self):
        res = fuse(rand((5, 8, 8)), rand((7, 8, 8)), GRID, GRID, FusionConv(5, 7))
        assert res.features.shape == (5, 8, 8)
        assert res.provenance == {"camera": (5, 8, 8), "radar": (7, 8, 8), "fused": (5, 8, 8)}

    def test_grid_mismatch_rejected(self):
        other = BevGridSpec(-4.0, 4.0, -3.0, 5.0, 1.0)
        with pytest.raises(GridMismatchError):
            fuse(rand((2, 8, 8)), rand((2, 8, 8)), GRID, other, FusionConv(2, 2))

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(GridMismatchError):
            fuse(rand((2, 8, 8)), rand((2, 4, 4)), GRID, GRID, FusionConv(2, 2))

    def test_batched(self):
        out = fuse(rand((3, 2, 8, 8)), rand((3, 4, 8, 8)), GRID, GRID, FusionConv(2, 4)).features
        assert out.shape == (3, 2, 8, 8)

    def test_gradients(self):
        layer = FusionConv(3, 2, rng=np.random.default_rng(1))
        w = np.random.default_rng(2).standard_normal(layer.conv.weight.shape)
        grid = BevGridSpec(0, 4, 0, 4, 1.0)
        rng = np.random.default_rng(3)

        def fn(cam, rad):
            layer.conv.weight = Tensor(w)
            layer.conv.bias = Tensor(np.zeros(3))
            return fuse(cam, rad, grid, grid, layer).features

        assert check_gradients(fn, [rng.standard_normal((3, 4, 4)), rng.standard_normal((2, 4, 4))]) < 1e-4

    def test_translation_equivariance(self):
        layer = FusionConv(3, 2, rng=np.random.default_rng(4))
        layer.conv.weight.data[...] = np.random.default_rng(5).standard_normal(layer.conv.weight.shape)
        cam, rad = rand((3, 8, 8), 6), rand((2, 8, 8), 7)
        base = fuse(cam, rad, GRID, GRID, layer).features.data
        shifted = fuse(Tensor(np.roll(cam.data, (2, 1), (1, 2))), Tensor(np.roll(rad.data, (2, 1), (1, 2))),
                       GRID, GRID, layer).features.data
        np.testing.assert_allclose(shifted, np.roll(base, (2, 1), (1, 2)), atol=1e-6)


class TestBevEncoder:
    def test_zero_input_zero_init(self):
        enc = BevEncoder(4, 8, 6)
        enc.net.zero_output()
        out = bev_encoder(Tensor(np.zeros((4, 8, 8), np.float32)), enc)
        assert out.shape == (6, 8, 8) and not out.data.any()

    def test_deterministic(self):
        x = rand((2, 4, 8, 8))
        a = bev_encoder(x, BevEncoder(4, 8, 6, rng=np.random.default_rng(9))).data
        b = bev_encoder(x, BevEncoder(4, 8, 6, rng=np.random.default_rng(9))).data
        np.testing.assert_array_equal(a, b)


class TestShapeTable:
    def test_full_size_rows(self):
        rows = {r["config"]: r for r in shape_table()}
        assert rows["bevdet"]["camera_bev"] == (80, 256, 256)
        assert rows["bevdepth"]["camera_bev"] == (80, 128, 128)
        for r in rows.values():
            assert r["radar_output"] == r["camera_bev"]
            assert r["fused"] == r["camera_bev"]
        assert rows["bevdet"]["encoder_output"] == (256, 256, 256)
        assert rows["matrixvt"]["encoder_output"] == (64, 128, 128)

    def test_spec_example(self):
        # 32 channels at 256x256 -> 128 channels at 64x64 through the two stages
        net = RadarBackbone(32, 32)
        assert backbone_output_hw(net.net, (256, 256)) == (64, 64)
        assert net.out_channels == 128

    @pytest.mark.parametrize("layout", FULL_SIZE_LAYOUTS, ids=lambda l: l.name)
    def test_arithmetic_matches_forward(self, layout):
        # scaled-down forward pass: same stride structure, 1/16 of the extent
        net = RadarBackbone(4, 2, out_channels=layout.cam_channels // 16, rng=np.random.default_rng(0)).eval()
        h = layout.radar_grid.H // 16
        out = net(Tensor(np.zeros((1, 4, h, h), np.float32)))
        assert out.shape[-2:] == backbone_output_hw(net.net, (h, h)) == (layout.bev_grid.H // 16,) * 2

    def test_radar_backbone_has_sixteen_layers(self):
        assert RadarBackbone(4, 4).net.conv_layer_count() == 16
