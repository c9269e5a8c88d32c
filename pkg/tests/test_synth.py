import json

import numpy as np
import pytest

from dishvol.errors import InvalidSpec
from dishvol.geometry import RelativePose, project_points
from dishvol.synth import (
    BoxItem,
    CameraPose,
    HemisphereItem,
    SceneSpec,
    analytic_volume,
    default_intrinsics,
    make_camera_pair,
    make_scene,
    make_test_scenes,
    relative_angle_deg,
    true_relative_pose,
    write_scene_dir,
)


def hemisphere_spec(radius=30.0, angle=20.0):
    return SceneSpec(items=[HemisphereItem((0.0, 0.0), radius)],
                     cameras=make_camera_pair(500.0, angle))


class TestSceneSpec:
    def test_valid_scene_builds(self):
        scene = make_scene(hemisphere_spec())
        assert scene.spec.plate.bottom_height > 0

    def test_camera_tilt_bound(self):
        spec = hemisphere_spec()
        spec.cameras = [CameraPose((500.0, 0.0, 280.0)),  # ~60 deg tilt
                        CameraPose((0.0, 0.0, 500.0))]
        with pytest.raises(InvalidSpec):
            make_scene(spec)

    def test_item_outside_plate_rejected(self):
        spec = SceneSpec(items=[HemisphereItem((100.0, 0.0), 30.0)],
                         cameras=make_camera_pair(500.0, 20.0))
        with pytest.raises(InvalidSpec):
            make_scene(spec)

    def test_overlapping_items_rejected(self):
        spec = SceneSpec(items=[HemisphereItem((0.0, 0.0), 25.0),
                                BoxItem((10.0, 0.0), (30.0, 30.0, 20.0))],
                         cameras=make_camera_pair(500.0, 20.0))
        with pytest.raises(InvalidSpec):
            make_scene(spec)

    def test_json_roundtrip(self):
        spec = SceneSpec(items=[HemisphereItem((3.0, -2.0), 27.0),
                                BoxItem((48.0, 10.0), (40.0, 38.0, 22.0))],
                         cameras=make_camera_pair(480.0, 18.0, azimuth_deg=40))
        d = json.loads(json.dumps(spec.to_json_dict()))
        back = SceneSpec.from_json_dict(d)
        assert back.to_json_dict() == spec.to_json_dict()


class TestAnalyticVolume:
    def test_hemisphere_closed_form(self):
        vols = analytic_volume(hemisphere_spec(30.0))
        exact = (2.0 / 3.0) * np.pi * 30.0 ** 3 / 1000.0
        assert vols[2] == pytest.approx(exact, rel=1e-3)

    def test_box_product(self):
        spec = SceneSpec(items=[BoxItem((0.0, 0.0), (50.0, 40.0, 20.0))],
                         cameras=make_camera_pair(500.0, 20.0))
        assert analytic_volume(spec)[2] == pytest.approx(40.0, rel=1e-6)

    def test_two_items_additive(self):
        both = SceneSpec(items=[HemisphereItem((-40.0, 0.0), 22.0),
                                BoxItem((40.0, 0.0), (40.0, 36.0, 18.0))],
                         cameras=make_camera_pair(500.0, 20.0))
        vols = analytic_volume(both)
        only_h = analytic_volume(SceneSpec(
            items=[HemisphereItem((-40.0, 0.0), 22.0)],
            cameras=both.cameras))
        only_b = analytic_volume(SceneSpec(
            items=[BoxItem((40.0, 0.0), (40.0, 36.0, 18.0))],
            cameras=both.cameras))
        assert vols[2] + vols[3] == pytest.approx(only_h[2] + only_b[2],
                                                  rel=1e-12)

    def test_convergence_under_refinement(self):
        spec = hemisphere_spec(28.0)
        v1 = analytic_volume(spec, pitch_mm=0.5)[2]
        v2 = analytic_volume(spec, pitch_mm=0.25)[2]
        assert abs(v2 - v1) / v1 < 5e-4

    def test_zero_height_field(self):
        spec = SceneSpec(items=[BoxItem((0.0, 0.0), (40.0, 40.0, 0.0))],
                         cameras=make_camera_pair(500.0, 20.0))
        assert analytic_volume(spec)[2] == 0.0


class TestRender:
    def test_flat_scene_constant_depth(self):
        spec = SceneSpec(items=[BoxItem((0.0, 0.0), (40.0, 40.0, 0.0))],
                         cameras=[CameraPose((0.0, 0.0, 500.0))])
        spec.plate = type(spec.plate)(semi_axes=(110.0, 95.0),
                                      rim_height=0.0, bottom_height=0.0)
        scene = make_scene(spec)
        K = default_intrinsics()
        _, depth, seg = scene.render(0, K)
        # everything lies in the z=0 plane seen from 500 mm straight above
        assert np.allclose(depth[depth > 0], 500.0, atol=1e-6)

    def test_deterministic_render(self):
        scene = make_scene(hemisphere_spec())
        K = default_intrinsics()
        img_a, depth_a, seg_a = scene.render(0, K)
        img_b, depth_b, seg_b = scene.render(0, K)
        assert np.array_equal(img_a.pixels, img_b.pixels)
        assert np.array_equal(depth_a, depth_b)
        assert np.array_equal(seg_a, seg_b)

    def test_depth_reprojects_into_other_view(self):
        spec = hemisphere_spec()
        scene = make_scene(spec)
        K = default_intrinsics()
        img1, depth1, seg1 = scene.render(0, K)
        img2, depth2, _ = scene.render(1, K)
        pose = true_relative_pose(spec)
        rng = np.random.default_rng(0)
        ys = rng.integers(80, K.height - 80, 800)
        xs = rng.integers(80, K.width - 80, 800)
        z = depth1[ys, xs]
        good = z > 0
        pts = np.stack([(xs - K.cx) / K.fx * z, (ys - K.cy) / K.fy * z, z],
                       axis=1)[good]
        uv2, front = project_points(pts, K, pose)
        ui = np.clip(np.round(uv2[:, 0]).astype(int), 0, K.width - 1)
        vi = np.clip(np.round(uv2[:, 1]).astype(int), 0, K.height - 1)
        z2_expected = pose.transform(pts)[:, 2]
        z2 = depth2[vi, ui]
        consistent = np.abs(z2 - z2_expected) < 2.0
        # occlusion boundaries excepted
        assert consistent.mean() > 0.95

    def test_texture_contrast(self):
        scene = make_scene(hemisphere_spec())
        K = default_intrinsics()
        img, _, seg = scene.render(0, K)
        on_dish = img.pixels[seg >= 1].astype(float)
        assert np.percentile(on_dish, 97) - np.percentile(on_dish, 3) >= 40


class TestHelpers:
    def test_camera_pair_angle(self):
        for target in (15.0, 20.0, 25.0):
            spec = SceneSpec(items=[HemisphereItem((0.0, 0.0), 25.0)],
                             cameras=make_camera_pair(500.0, target, 30.0))
            assert relative_angle_deg(spec) == pytest.approx(target, abs=1e-9)

    def test_true_pose_scale_is_baseline(self):
        spec = hemisphere_spec()
        pose = true_relative_pose(spec)
        c0 = np.asarray(spec.cameras[0].position)
        c1 = np.asarray(spec.cameras[1].position)
        assert pose.scale == pytest.approx(np.linalg.norm(c0 - c1))

    def test_make_test_scenes_all_valid(self):
        scenes = make_test_scenes(21, master_seed=5)
        assert len(scenes) == 21
        kinds = set()
        for name, spec in scenes:
            make_scene(spec)  # validates
            assert 15.0 <= relative_angle_deg(spec) <= 25.0
            kinds.add(name.split("_")[2])
        assert kinds == {"hemisphere", "box", "two"}

    def test_write_scene_dir(self, tmp_path):
        out = write_scene_dir(hemisphere_spec(), tmp_path / "s0")
        for name in ("img1.png", "img2.png", "seg1.png", "card_pattern.png",
                     "intrinsics.json", "scene.json", "ground_truth.json"):
            assert (out / name).exists()
        truth = json.loads((out / "ground_truth.json").read_text())
        assert truth["volumes_ml"]["2"] == pytest.approx(56.549, rel=1e-3)
