import math

import numpy as np
import pytest

from scmii.geometry import Pose6DoF, RigidTransform, apply_point, from_pose, invert
from scmii.pointcloud import (
    Box, CloudFormatError, GroundTruth, PlacementError, PointCloud, SceneSpec, beam_directions, gen_frames,
    gen_scene, load_cloud, merge_clouds, occlusion_benchmark, place_boxes, reference_frame_boxes, save_cloud,
    scan_sensor, sensor_layout, transform_cloud, voxel_downsample,
)


def ray_box_oracle(d, lo, hi):
    """Entry distance of a ray from the origin into a box, one axis at a time."""
    t_near, t_far = -math.inf, math.inf
    for k in range(3):
        if d[k] == 0:
            if not lo[k] <= 0 <= hi[k]:
                return math.inf
            continue
        a, b = lo[k] / d[k], hi[k] / d[k]
        t_near, t_far = max(t_near, min(a, b)), min(t_far, max(a, b))
    return t_near if t_far >= t_near > 0 else math.inf


def on_box_surface(p, box, tol):
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    inside = np.all(p >= lo - tol) and np.all(p <= hi + tol)
    near_face = np.any(np.minimum(np.abs(p - lo), np.abs(p - hi)) <= tol)
    return inside and near_face


class TestCloudIO:
    def test_csv_two_points(self, tmp_path):
        (tmp_path / "c.csv").write_text("0,0,0\n1,2,3")
        c = load_cloud(tmp_path / "c.csv")
        assert len(c) == 2
        np.testing.assert_array_equal(c.points[1], [1, 2, 3])

    @pytest.mark.parametrize("name", ["e.csv", "e.bin"])
    def test_empty_file(self, tmp_path, name):
        (tmp_path / name).write_bytes(b"")
        assert len(load_cloud(tmp_path / name)) == 0

    def test_csv_round_trip_exact(self, tmp_path):
        c = PointCloud(np.random.default_rng(0).normal(size=(1000, 3)).astype(np.float32).astype(np.float64) * 30)
        save_cloud(c, tmp_path / "c.csv")
        assert load_cloud(tmp_path / "c.csv") == c

    def test_binary_round_trip_f32(self, tmp_path):
        c = PointCloud(np.random.default_rng(1).normal(size=(1000, 3)) * 30)
        save_cloud(c, tmp_path / "c.bin")
        back = load_cloud(tmp_path / "c.bin")
        np.testing.assert_array_equal(back.points, c.points.astype(np.float32).astype(np.float64))

    def test_csv_error_names_line(self, tmp_path):
        (tmp_path / "c.csv").write_text("0,0,0\n1,2\n")
        with pytest.raises(CloudFormatError, match="line 2"):
            load_cloud(tmp_path / "c.csv")

    def test_binary_truncated(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"\x05\x00\x00\x00" + b"\x00" * 12)
        with pytest.raises(CloudFormatError, match="truncated"):
            load_cloud(tmp_path / "c.bin")

    def test_csv_with_intensity(self, tmp_path):
        (tmp_path / "c.csv").write_text("0,0,0,0.5\n1,2,3,0.25\n")
        c = load_cloud(tmp_path / "c.csv")
        np.testing.assert_array_equal(c.intensity, [0.5, 0.25])


class TestCloudOps:
    def test_transform_identity(self):
        c = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
        assert transform_cloud(c, RigidTransform.identity()) == c

    def test_transform_translation(self):
        c = transform_cloud(PointCloud([[0.0, 0.0, 0.0]]), from_pose(Pose6DoF(tx=1)))
        np.testing.assert_array_equal(c.points, [[1, 0, 0]])

    def test_centroid_commutes(self):
        rng = np.random.default_rng(3)
        c = PointCloud(rng.normal(size=(200, 3)))
        t = from_pose(Pose6DoF(1, -2, 3, 0.3, 0.2, -1.0))
        np.testing.assert_allclose(transform_cloud(c, t).centroid(), apply_point(t, c.centroid()), atol=1e-12)

    def test_voxel_downsample_centroids(self):
        c = PointCloud([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [1.5, 0.0, 0.0]])
        d = voxel_downsample(c, 1.0)
        got = sorted(map(tuple, np.round(d.points, 12)))
        assert got == [(0.2, 0.2, 0.2), (1.5, 0.0, 0.0)]

    def test_merge(self):
        assert len(merge_clouds([PointCloud.empty(), PointCloud([[1.0, 2.0, 3.0]])])) == 1


class TestRayCasting:
    def test_no_objects_no_ground_is_empty(self):
        clouds, truth = gen_scene(SceneSpec(object_count=(0, 0), ground=False))
        assert all(len(c) == 0 for c in clouds)
        assert truth.boxes == ()

    def test_unit_cube_matches_oracle(self):
        spec = SceneSpec(ground=False, range_noise=0.0, azimuth_span=(-0.3, 0.3), elevation_span=(-0.3, 0.3),
                         azimuth_step=0.01, elevation_step=0.01, sensors=(Pose6DoF(),))
        box = Box((5.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        cloud = scan_sensor(spec, [box], RigidTransform.identity(), None)
        assert len(cloud) > 100
        lo, hi = np.asarray(box.lo), np.asarray(box.hi)
        for p in cloud.points:
            d = p / np.linalg.norm(p)
            assert abs(np.linalg.norm(p) - ray_box_oracle(d, lo, hi)) <= 1e-9
        # every beam that the oracle says hits the cube produced a point
        hits = sum(math.isfinite(ray_box_oracle(d, lo, hi)) for d in beam_directions(spec))
        assert hits == len(cloud)

    def test_noisy_points_near_surface(self):
        spec = SceneSpec(ground=False, range_noise=0.02, azimuth_span=(-0.3, 0.3), elevation_span=(-0.3, 0.3),
                         azimuth_step=0.01, elevation_step=0.01, sensors=(Pose6DoF(),))
        box = Box((5.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        cloud = scan_sensor(spec, [box], RigidTransform.identity(), np.random.default_rng(0))
        assert all(on_box_surface(p, box, 5 * 0.02) for p in cloud.points)

    def test_nearest_hit_occlusion(self):
        spec = SceneSpec(ground=False, range_noise=0.0, azimuth_span=(-0.2, 0.2), elevation_span=(-0.2, 0.2),
                         azimuth_step=0.02, elevation_step=0.02, sensors=(Pose6DoF(),))
        near, far = Box((4.0, 0.0, 0.0), (1.0, 4.0, 4.0)), Box((8.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        cloud = scan_sensor(spec, [far, near], RigidTransform.identity(), None)
        np.testing.assert_allclose(cloud.points[:, 0], 3.5, atol=1e-9)

    def test_same_seed_bit_identical(self):
        a, ta = gen_scene(SceneSpec(seed=11))
        b, tb = gen_scene(SceneSpec(seed=11))
        assert all(x == y for x, y in zip(a, b))
        assert ta.boxes == tb.boxes

    def test_frame_consistency(self, small_scene):
        clouds, truth = small_scene
        for cloud, ext in zip(clouds, truth.extrinsics):
            world = transform_cloud(cloud, ext).points
            above = world[world[:, 2] > 0.1]
            ok = [any(on_box_surface(p, b, 0.06) for b in truth.boxes) for p in above[::25]]
            assert all(ok)
            np.testing.assert_allclose(world[world[:, 2] <= 0.1][:, 2], 0.0, atol=0.1)


class TestPlacement:
    def test_no_overlap(self):
        spec = SceneSpec(object_count=(30, 30), seed=4)
        boxes = place_boxes(spec, np.random.default_rng(4))
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                gap = np.abs(np.subtract(a.center[:2], b.center[:2])) - (np.add(a.size[:2], b.size[:2]) / 2)
                assert np.any(gap >= 0)

    def test_impossible_density_raises(self):
        spec = SceneSpec(extent=(-5, 5, -5, 5), object_count=(40, 40), sensors=(Pose6DoF(20, 20, 4),))
        with pytest.raises(PlacementError, match="smaller object count"):
            place_boxes(spec, np.random.default_rng(0))

    def test_sensor_layout(self):
        assert sensor_layout(2) == SceneSpec().sensors
        four = sensor_layout(4)
        assert len(four) == 4 and four[0].yaw == 0.0

    def test_truth_round_trip(self, tmp_path, small_scene):
        _, truth = small_scene
        truth.save(tmp_path / "t.json")
        back = GroundTruth.load(tmp_path / "t.json")
        assert back.boxes == truth.boxes and back.extrinsics == truth.extrinsics

    def test_reference_boxes_translate(self, small_scene):
        _, truth = small_scene
        ref = reference_frame_boxes(truth)
        np.testing.assert_allclose(ref[0].center, apply_point(invert(truth.extrinsics[0]), truth.boxes[0].center))

    def test_frames_and_benchmark_deterministic(self):
        a = gen_frames(SceneSpec(seed=1, azimuth_step=0.05), 2)
        assert a[0][1].boxes != a[1][1].boxes
        assert occlusion_benchmark(7, 5) == occlusion_benchmark(7, 5)
