"""Scene generation determinism and geometry, file formats, strict config."""

import json
import math

import numpy as np
import pytest

from pillarmamba.boxes import Box3D
from pillarmamba.config import (
    config_from_dict,
    config_to_dict,
    default_config,
    desk_grid,
    load_config,
)
from pillarmamba.data_io import (
    SceneSpec,
    generate_scene,
    load_cloud,
    load_labels,
    load_manifest,
    save_cloud,
    save_labels,
    write_dataset,
)
from pillarmamba.errors import ConfigurationError, FormatError, GenerationError
from pillarmamba.metrics import rotated_iou_bev
from pillarmamba.model import build_model
from pillarmamba.pillars import PointCloud


class TestGenerateScene:
    def test_same_seed_bit_identical(self):
        spec = SceneSpec(grid=desk_grid(), seed=42)
        cloud_a, boxes_a = generate_scene(spec)
        cloud_b, boxes_b = generate_scene(spec)
        np.testing.assert_array_equal(cloud_a.points, cloud_b.points)
        assert [(b.x, b.y, b.yaw) for b in boxes_a] == [(b.x, b.y, b.yaw) for b in boxes_b]

    def test_zero_counts_background_only(self):
        spec = SceneSpec(grid=desk_grid(), counts={}, background_points=64, seed=0)
        cloud, boxes = generate_scene(spec)
        assert boxes == []
        assert len(cloud) == 64

    def test_box_points_inside_footprint(self):
        spec = SceneSpec(grid=desk_grid(), counts={"vehicle": 2}, background_points=0, seed=5)
        cloud, boxes = generate_scene(spec)
        pts = cloud.points
        for i, b in enumerate(boxes):
            chunk = pts[i * spec.points_per_box : (i + 1) * spec.points_per_box]
            c, s = math.cos(b.yaw), math.sin(b.yaw)
            lx = c * (chunk[:, 0] - b.x) + s * (chunk[:, 1] - b.y)
            ly = -s * (chunk[:, 0] - b.x) + c * (chunk[:, 1] - b.y)
            assert (np.abs(lx) <= b.l / 2 + 1e-5).all()
            assert (np.abs(ly) <= b.w / 2 + 1e-5).all()
            assert (np.abs(chunk[:, 2] - b.z) <= b.h / 2 + 1e-5).all()

    def test_no_gt_overlap_and_centers_in_range(self):
        grid = desk_grid()
        spec = SceneSpec(grid=grid, counts={"vehicle": 3, "pedestrian": 3, "cyclist": 2}, seed=9)
        _, boxes = generate_scene(spec)
        assert len(boxes) == 8
        for b in boxes:
            assert grid.x_range[0] <= b.x < grid.x_range[1]
            assert grid.y_range[0] <= b.y < grid.y_range[1]
        for i, a in enumerate(boxes):
            for b in boxes[i + 1 :]:
                assert rotated_iou_bev(a, b) == 0.0

    def test_impossible_placement_raises(self):
        tight = SceneSpec(
            grid=desk_grid(), counts={"vehicle": 40}, min_center_gap=6.0, seed=0
        )
        with pytest.raises(GenerationError) as err:
            generate_scene(tight)
        assert "vehicle" in str(err.value)

    def test_invalid_spec_rejected(self):
        with pytest.raises(GenerationError):
            SceneSpec(grid=desk_grid(), counts={"vehicle": -1})
        with pytest.raises(GenerationError):
            SceneSpec(grid=desk_grid(), points_per_box=0)
        with pytest.raises(GenerationError) as err:
            SceneSpec(grid=desk_grid(), counts={"truck": 1})
        assert "truck" in str(err.value)
        with pytest.raises(GenerationError):
            SceneSpec(grid=desk_grid(), counts={"vehicle": 1}, size_priors={"pedestrian": (0.8, 0.8, 1.7)})


class TestCloudFormat:
    def test_roundtrip(self, tmp_path):
        r = np.random.Generator(np.random.PCG64(0))
        cloud = PointCloud(r.normal(size=(37, 4)).astype(np.float32))
        path = tmp_path / "c.bin"
        save_cloud(path, cloud)
        back = load_cloud(path)
        np.testing.assert_array_equal(back.points, cloud.points)

    def test_sixteen_bytes_is_one_point(self, tmp_path):
        path = tmp_path / "one.bin"
        path.write_bytes(np.array([1.0, 2.0, -1.0, 0.5], dtype="<f4").tobytes())
        cloud = load_cloud(path)
        assert len(cloud) == 1
        np.testing.assert_allclose(cloud.points[0], [1.0, 2.0, -1.0, 0.5])

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 17)
        with pytest.raises(FormatError) as err:
            load_cloud(path)
        assert "17" in str(err.value)


class TestLabelFormat:
    def test_roundtrip(self, tmp_path):
        boxes = [
            Box3D(x=1.234567890123, y=-2.5, z=-1.0, l=4.1, w=1.9, h=1.5, yaw=0.37, cls=0),
            Box3D(x=3.0, y=0.0, z=-1.2, l=0.8, w=0.8, h=1.6, yaw=-2.9, cls=1),
        ]
        path = tmp_path / "labels.json"
        save_labels(path, boxes)
        back = load_labels(path)
        assert len(back) == 2
        for a, b in zip(boxes, back):
            assert (a.x, a.y, a.z, a.l, a.w, a.h, a.yaw, a.cls) == (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.cls)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("[]")
        assert load_labels(path) == []

    def test_yaw_normalized_on_load(self, tmp_path):
        path = tmp_path / "yaw.json"
        path.write_text(json.dumps([{"class": "vehicle", "center": [1, 2, -1], "size": [4, 2, 1.5], "yaw": 3.2}]))
        (box,) = load_labels(path)
        assert box.yaw == pytest.approx(3.2 - 2 * math.pi)

    def test_unknown_class_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([{"class": "tricycle", "center": [0, 0, 0], "size": [1, 1, 1], "yaw": 0}]))
        with pytest.raises(FormatError) as err:
            load_labels(path)
        assert "tricycle" in str(err.value) and "vehicle" in str(err.value)


class TestManifest:
    def test_roundtrip_and_existence_check(self, tmp_path):
        manifest_path = write_dataset(tmp_path, default_config(), n_scenes=2, seed=0)
        manifest = load_manifest(manifest_path)
        assert len(manifest.entries) == 2
        (tmp_path / manifest.entries[0][0]).unlink()
        with pytest.raises(FormatError):
            load_manifest(manifest_path)

    def test_missing_scene_key(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"split": "val", "scenes": [{"cloud": "a.bin"}]}))
        with pytest.raises(FormatError):
            load_manifest(path)


class TestConfig:
    def test_minimal_config_gets_documented_defaults(self):
        cfg = config_from_dict({"grid": {"x_range": [0.0, 12.8], "y_range": [-6.4, 6.4], "z_range": [-3.0, 1.0]}})
        dumped = config_to_dict(cfg)
        assert dumped == config_to_dict(default_config())
        assert cfg.model.channels == 64
        assert cfg.model.ssm.state_dim == 8
        assert cfg.head.top_k == 100
        assert cfg.eval.iou_thresholds == {"vehicle": 0.5, "pedestrian": 0.25, "cyclist": 0.25}

    def test_echo_dump_roundtrip(self):
        cfg = default_config()
        assert config_to_dict(config_from_dict(config_to_dict(cfg))) == config_to_dict(cfg)

    def test_missing_grid_rejected(self):
        with pytest.raises(ConfigurationError) as err:
            config_from_dict({})
        assert "grid" in str(err.value)

    def test_unknown_key_names_dotted_path(self):
        raw = config_to_dict(default_config())
        raw["model"]["hsb"]["attn"] = True
        with pytest.raises(ConfigurationError) as err:
            config_from_dict(raw)
        assert "model.hsb.attn" in str(err.value)

    def test_type_mismatch_names_path(self):
        raw = config_to_dict(default_config())
        raw["grid"]["pillar_size"] = "wide"
        with pytest.raises(ConfigurationError) as err:
            config_from_dict(raw)
        assert "grid.pillar_size" in str(err.value)

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"grid": {"x_range": [0, 12.8,]}}')
        with pytest.raises(ConfigurationError) as err:
            load_config(path)
        assert "line" in str(err.value)

    def test_attention_toggle_controls_se_params(self):
        raw = config_to_dict(default_config())
        raw["model"]["channels"] = 16
        raw["model"]["ssm"]["state_dim"] = 2
        raw["model"]["hsb"]["attention"] = False
        cfg = config_from_dict(raw)
        model = build_model(cfg, seed=0)
        names = [name for name, _ in model.named_params()]
        assert not any(".se." in n for n in names)
        raw["model"]["hsb"]["attention"] = True
        model_attn = build_model(config_from_dict(raw), seed=0)
        assert any(".se." in n for n, _ in model_attn.named_params())

    def test_csg_toggle_controls_structure(self):
        raw = config_to_dict(default_config())
        raw["model"]["channels"] = 16
        raw["model"]["ssm"]["state_dim"] = 2
        raw["model"]["csg"]["enabled"] = False
        names = [n for n, _ in build_model(config_from_dict(raw), seed=0).named_params()]
        assert not any(".csg." in n for n in names)
        assert any(".hsb0." in n for n in names)
