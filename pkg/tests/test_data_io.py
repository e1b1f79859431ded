import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import Delaunay

from bevfuse import radar
from bevfuse.data.dataset import Dataset, DatasetError, read_ppm, write_dataset, write_ppm
from bevfuse.data.pcd import PcdError, PcdFieldError, import_ascii_pcd
from bevfuse.data.synthetic import (
    SceneGenConfig,
    boxes_at,
    build_bundle,
    generate_scene,
    object_mask,
    sample_rng,
)
from bevfuse.data.sweep_io import (
    HEADER_SIZE,
    BadMagicError,
    SweepFormatError,
    TrailingDataError,
    TruncatedSweepError,
    VersionMismatchError,
    decode_sweep,
    encode_sweep,
    read_sweep,
    write_sweep,
)
from bevfuse.geometry import Box3D
from bevfuse.radar import RadarSweep

SMALL = SceneGenConfig(image_width=176, image_height=64)


# ---------------------------------------------------------------------------
# sweep files
# ---------------------------------------------------------------------------

class TestSweepFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        s = RadarSweep(123456789012, rng.normal(0, 10, (37, 4)).astype(np.float32))
        write_sweep(s, tmp_path / "a.rswp")
        back = read_sweep(tmp_path / "a.rswp")
        assert back.timestamp_us == s.timestamp_us
        assert back.points.tobytes() == s.points.tobytes()
        assert (tmp_path / "a.rswp").read_bytes() == encode_sweep(back)

    def test_empty_is_20_bytes(self, tmp_path):
        write_sweep(RadarSweep(5, np.zeros((0, 4))), tmp_path / "e.rswp")
        assert (tmp_path / "e.rswp").stat().st_size == 20 == HEADER_SIZE
        assert len(read_sweep(tmp_path / "e.rswp")) == 0

    def test_header_layout(self):
        buf = encode_sweep(RadarSweep(7, np.array([[1.0, 2.0, 3.0, -4.0]])))
        assert struct.unpack("<4sHHQI", buf[:20]) == (b"RSWP", 1, 0, 7, 1)
        assert struct.unpack("<4f", buf[20:]) == (1.0, 2.0, 3.0, -4.0)

    def test_bad_magic(self):
        buf = bytearray(encode_sweep(RadarSweep(0, np.zeros((2, 4)))))
        buf[0:4] = b"RSWQ"
        with pytest.raises(BadMagicError):
            decode_sweep(bytes(buf))

    def test_version(self):
        buf = bytearray(encode_sweep(RadarSweep(0, np.zeros((1, 4)))))
        buf[4:6] = struct.pack("<H", 9)
        with pytest.raises(VersionMismatchError):
            decode_sweep(bytes(buf))

    @pytest.mark.parametrize("cut", [0, 3, 19, 21, 35])
    def test_truncated(self, cut):
        buf = encode_sweep(RadarSweep(0, np.ones((2, 4))))
        with pytest.raises(TruncatedSweepError):
            decode_sweep(buf[:cut])

    def test_trailing(self):
        with pytest.raises(TrailingDataError):
            decode_sweep(encode_sweep(RadarSweep(0, np.ones((1, 4)))) + b"\0")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            encode_sweep(RadarSweep(0, np.array([[np.nan, 0, 0, 0]])))

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=80))
    def test_fuzz_typed_errors(self, data):
        try:
            s = decode_sweep(data)
        except SweepFormatError:
            return
        assert len(data) == HEADER_SIZE + 16 * len(s)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 5), st.integers(0, 60), st.integers(0, 255))
    def test_fuzz_corrupted_valid_file(self, n, pos, byte):
        buf = bytearray(encode_sweep(RadarSweep(99, np.arange(4 * n, dtype=np.float32).reshape(n, 4))))
        if pos < len(buf):
            buf[pos] = byte
        try:
            decode_sweep(bytes(buf))
        except SweepFormatError:
            pass


# ---------------------------------------------------------------------------
# ASCII PCD
# ---------------------------------------------------------------------------

PCD = """# .PCD v0.7 - Point Cloud Data file format
VERSION 0.7
FIELDS x y z dyn_prop rcs vx_comp vy_comp
SIZE 4 4 4 1 1 4 4
TYPE F F F I I F F
COUNT 1 1 1 1 1 1 1
WIDTH 3
HEIGHT 1
POINTS 3
DATA ascii
10 0 0 0 5 -4 0
0 5 0 1 -2 0 3
3 4 0 0 12 1 2
"""


class TestPcd:
    def test_three_points(self, tmp_path):
        p = tmp_path / "r.pcd"
        p.write_text(PCD)
        s = import_ascii_pcd(p, timestamp_us=42)
        # hand computation: v_d = (x vx + y vy) / r
        expected = np.array([[10, 0, 5, -4], [0, 5, -2, 3], [3, 4, 12, (3 * 1 + 4 * 2) / 5]], dtype=np.float32)
        np.testing.assert_allclose(s.points, expected, atol=1e-6)
        assert s.timestamp_us == 42

    def test_bearing_zero(self, tmp_path):
        p = tmp_path / "r.pcd"
        p.write_text(PCD)
        assert import_ascii_pcd(p).points[0, 3] == pytest.approx(-4.0)

    def test_missing_rcs(self, tmp_path):
        p = tmp_path / "r.pcd"
        p.write_text(PCD.replace(" rcs ", " foo "))
        with pytest.raises(PcdFieldError):
            import_ascii_pcd(p)

    def test_binary_rejected(self, tmp_path):
        p = tmp_path / "r.pcd"
        p.write_bytes(PCD.replace("DATA ascii", "DATA binary").split("10 0")[0].encode() + b"\xff\xfe\x00")
        with pytest.raises(PcdError):
            import_ascii_pcd(p)

    def test_custom_field_map(self, tmp_path):
        p = tmp_path / "r.pcd"
        p.write_text(PCD.replace("vx_comp vy_comp", "u v"))
        s = import_ascii_pcd(p, {"x": "x", "y": "y", "rcs": "rcs", "vx": "u", "vy": "v"})
        assert len(s) == 3


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def quiet(**kw):
    base = dict(image_width=96, image_height=48, pos_sigma=0.0, vd_sigma=0.0, rcs_sigma=0.0, clutter_rate=0.0,
                image_noise=0.0)
    base.update(kw)
    return SceneGenConfig(**base)


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_scene(SMALL, 7), generate_scene(SMALL, 7)
        assert a.images.tobytes() == b.images.tobytes()
        assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(a.sweeps, b.sweeps))
        assert [x.to_dict() for x in a.boxes] == [y.to_dict() for y in b.boxes]
        assert a.description == b.description

    def test_different_t_differs(self):
        assert generate_scene(SMALL, 1).images.tobytes() != generate_scene(SMALL, 2).images.tobytes()

    def test_static_object_zero_doppler(self):
        cfg = quiet()
        box = Box3D([12, 3, 0.8], (1.9, 4.5, 1.6), 0.3)
        b = build_bundle(cfg, 0, [box], "day", sample_rng(cfg, 0))
        pts = np.concatenate([s.points for s in b.sweeps])
        assert len(pts) > 0
        np.testing.assert_array_equal(pts[:, 3], 0.0)

    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_radial_approach(self, monkeypatch, sign):
        monkeypatch.setattr(radar, "DOPPLER_SIGN", sign)
        cfg = quiet()
        # on the front radar's boresight (sensor at x = 2), driving toward it at 5 m/s
        box = Box3D([15, 0, 0.8], (0.01, 0.01, 1.6), math.pi, velocity=(-5.0, 0.0))
        b = build_bundle(cfg, 0, [box], "day", sample_rng(cfg, 0))
        vd = b.sweeps[0].points[:, 3]
        assert len(vd) > 0
        np.testing.assert_allclose(vd, -5.0 * sign, atol=1e-3)

    def test_clutter_near_zero_doppler(self):
        cfg = SceneGenConfig(image_width=64, image_height=32, clutter_rate=50.0, vd_sigma=0.1)
        b = generate_scene(cfg, 0)
        clutter = b.sweeps[0].points[b.point_owner[0] < 0]
        assert len(clutter) > 10 and np.abs(clutter[:, 3]).max() < 1.0

    @pytest.mark.parametrize("t", range(10))
    def test_points_within_inflated_footprint(self, t):
        b = generate_scene(SMALL, t)
        period = 1.0 / SMALL.radar_hz
        for k, (sweep, owner) in enumerate(zip(b.sweeps, b.point_owner)):
            past = boxes_at(b.boxes, k * period, SMALL.ego_speed * k * period)
            for j, bx in enumerate(past):
                pts = sweep.points[owner == j, :2].astype(np.float64)
                if len(pts):
                    assert bx.contains_bev(pts, inflate=1.2 + 1e-5).all()

    @pytest.mark.parametrize("t", range(5))
    def test_no_overlap(self, t):
        boxes = generate_scene(SMALL, t).boxes
        for i in range(len(boxes)):
            for j in range(i):
                assert not boxes[i].contains_bev(boxes[j].bev_corners()).any()
                assert not boxes[j].contains_bev(boxes[i].bev_corners()).any()

    def test_infeasible_placement(self):
        from dataclasses import replace
        cars = replace(SMALL.classes[0], count=(60, 60))
        with pytest.raises(RuntimeError):
            generate_scene(replace(SMALL, classes=(cars,), extent=10.0, max_tries=20), 0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SceneGenConfig(pos_sigma=-1.0)
        with pytest.raises(ValueError):
            SceneGenConfig(clutter_rate=-1.0)

    @pytest.mark.parametrize("t", range(6))
    def test_silhouette_matches_projection(self, t):
        """Convex hull of projected corners vs the rendered mask, for boxes fully in view."""
        b = generate_scene(SMALL, t)
        checked = 0
        for cam in b.cameras:
            for bx in b.boxes:
                u, v, d, front = cam.project(bx.corners())
                if not (front.all() and d.min() > 0.5):
                    continue
                if u.min() < 0 or u.max() > cam.width - 1 or v.min() < 0 or v.max() > cam.height - 1:
                    continue
                mask = object_mask(bx, cam)
                vv, uu = np.mgrid[0:cam.height, 0:cam.width]
                hull = Delaunay(np.column_stack([u, v])).find_simplex(np.column_stack([uu.ravel(), vv.ravel()])) >= 0
                hull = hull.reshape(mask.shape)
                if hull.sum() < 4:
                    continue
                iou = (mask & hull).sum() / (mask | hull).sum()
                assert iou > 0.5
                checked += 1
        assert checked > 0

    def test_night_is_darker(self):
        from dataclasses import replace
        day = replace(SMALL, night_prob=0.0, rain_prob=0.0)
        night = replace(SMALL, night_prob=1.0, rain_prob=0.0)
        assert generate_scene(night, 3).images.mean() < 0.5 * generate_scene(day, 3).images.mean()
        assert "night" in generate_scene(night, 3).tags

    def test_images_are_8bit_values(self):
        img = generate_scene(SMALL, 0).images
        np.testing.assert_array_equal(np.round(img * 255) / 255, img.astype(np.float64).astype(np.float32))

    def test_aggregated_points(self):
        b = generate_scene(SMALL, 0)
        pts = b.radar_points()
        assert pts.shape == (sum(len(s) for s in b.sweeps), 5)
        assert pts[:, 4].min() == 0.0 and pts[:, 4].max() == pytest.approx(4 / 13, abs=1e-6)

    def test_config_dict_round_trip(self):
        assert SceneGenConfig.from_dict(json.loads(json.dumps(SMALL.to_dict()))) == SMALL


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------

class TestDataset:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.float32) / 255
        write_ppm(tmp_path / "a.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)

    def test_ppm_with_comment(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# hi\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        assert read_ppm(tmp_path / "c.ppm").shape == (1, 2, 3)

    def test_ppm_truncated(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(DatasetError):
            read_ppm(tmp_path / "t.ppm")

    def test_write_read(self, tmp_path):
        cfg = SceneGenConfig(image_width=64, image_height=32)
        write_dataset(cfg, tmp_path / "ds", 3)
        ds = Dataset(tmp_path / "ds", verify=True)
        assert len(ds) == 3 and ds.class_names == cfg.class_names
        for t, sid in enumerate(ds.sample_ids):
            ref = generate_scene(cfg, t)
            got = ds.load(sid)
            assert got.images.tobytes() == ref.images.tobytes()
            np.testing.assert_array_equal(got.radar_points(), ref.radar_points())
            assert [b.to_dict() for b in got.boxes] == [b.to_dict() for b in ref.boxes]
            assert got.description == ref.description

    def test_manifest_reproduces(self, tmp_path):
        cfg = SceneGenConfig(image_width=48, image_height=24, seed=5)
        write_dataset(cfg, tmp_path / "a", 2)
        m = json.loads((tmp_path / "a" / "manifest.json").read_text())
        write_dataset(SceneGenConfig.from_dict(m["generator"]), tmp_path / "b", m["num_samples"], m["start"])
        m2 = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert m["checksums"] == m2["checksums"]

    def test_tamper_detected(self, tmp_path):
        cfg = SceneGenConfig(image_width=48, image_height=24)
        write_dataset(cfg, tmp_path / "d", 1)
        ds = Dataset(tmp_path / "d")
        p = tmp_path / "d" / "samples" / ds.sample_ids[0] / "radar_0.rswp"
        p.write_bytes(p.read_bytes()[:-1] + b"\x01")
        with pytest.raises(DatasetError):
            ds.verify()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            Dataset(tmp_path)
