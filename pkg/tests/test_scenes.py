import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from geovox.detection import Box3D, iou3d
from geovox.geometry import (CameraIntrinsics, CameraView, look_at, pixel_to_ray,
                             project_points, voxel_centers)
from geovox.scenes import (CameraRig, PlacementError, SceneConfig, SceneObject, SceneSpec,
                           camera_trajectory, default_grid, generate_scene, intersect_scene,
                           load_bundle, occupancy_grid, render_reference, save_bundle)

K5 = CameraIntrinsics(4.0, 4.0, 2.0, 2.0, 5, 5)


def one_box_room(center=(3.2, 3.2, 0.5), size=(1.0, 1.0, 1.0)):
    return SceneSpec(np.zeros(3), np.array([6.4, 6.4, 3.2]),
                     [SceneObject(Box3D(center, size, 0), np.array([0.8, 0.2, 0.1]))],
                     np.array([[0.5, 0.5, 0.5], [0.6, 0.6, 0.6], [0.7, 0.7, 0.7], [0.4, 0.4, 0.4]]),
                     np.array([0.3, 0.2, 0.1]), np.array([0.9, 0.9, 0.9]))


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_scene(11), generate_scene(11)
        assert len(a.objects) == len(b.objects)
        for oa, ob in zip(a.objects, b.objects):
            assert_array_equal(oa.box.center, ob.box.center)
            assert_array_equal(oa.albedo, ob.albedo)
        assert_array_equal(a.wall_albedos, b.wall_albedos)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 2))
    def test_invariants(self, seed):
        spec = generate_scene(seed)
        assert 1 <= len(spec.objects) <= 4
        for i, o in enumerate(spec.objects):
            assert np.all(o.box.min >= spec.room_min) and np.all(o.box.max < spec.room_max)
            assert np.all((o.albedo >= 0) & (o.albedo <= 1))
            for p in spec.objects[i + 1:]:
                assert iou3d(o.box, p.box) <= 0.05

    def test_placement_error(self):
        cfg = SceneConfig(min_objects=4, max_objects=4, placement_half_width=0.8, max_attempts=50)
        with pytest.raises(PlacementError, match="smaller"):
            generate_scene(0, cfg)


class TestTrajectory:
    def test_spacing_and_aim(self):
        spec = one_box_room()
        poses = camera_trajectory(spec, 4, 2.0, 1.5)
        centers = np.array([p.center for p in poses])
        rel = centers[:, :2] - spec.center[:2]
        angles = np.degrees(np.arctan2(rel[:, 1], rel[:, 0]))
        assert_allclose(np.diff(angles) % 360, 90.0, atol=1e-9)
        assert_allclose(np.linalg.norm(rel, axis=1), 2.0, atol=1e-12)
        for p in poses:
            want = spec.center - p.center
            assert_allclose(p.rotation[2], want / np.linalg.norm(want), atol=1e-6)
            assert_allclose(p.inverse().translation, p.center, atol=1e-12)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            camera_trajectory(one_box_room(), 1, 2.0, 1.5)


class TestRender:
    def test_head_on_depth(self):
        spec = one_box_room()
        pose = look_at([0.7, 3.2, 0.5], [3.2, 3.2, 0.5])
        image, depth = render_reference(spec, K5, pose)
        assert depth[2, 2] == 2.0
        assert_array_equal(image[2, 2], spec.objects[0].albedo)

    def test_back_wall(self):
        spec = one_box_room(center=(5.0, 5.0, 0.5), size=(0.5, 0.5, 1.0))
        pose = look_at([1.0, 3.2, 1.6], [3.2, 3.2, 1.6])
        image, depth = render_reference(spec, K5, pose)
        assert depth[2, 2] == pytest.approx(5.4, abs=1e-12)
        assert_array_equal(image[2, 2], spec.wall_albedos[1])

    def test_matches_pixel_rays(self):
        spec = generate_scene(5)
        K = CameraRig().intrinsics()
        pose = camera_trajectory(spec, 3, 2.7, 2.4)[1]
        _, depth = render_reference(spec, K, pose)
        view = CameraView(K, pose, np.zeros((K.height, K.width, 3)))
        rng = np.random.default_rng(0)
        for _ in range(30):
            u, v = int(rng.integers(K.width)), int(rng.integers(K.height))
            ray = pixel_to_ray(u, v, view)
            t, _, _ = intersect_scene(spec, ray.origin[None], ray.direction[None])
            assert abs(t[0] - depth[v, u]) <= 1e-9

    def test_photometric_consistency(self, bundle):
        views, depths = bundle.source_views, bundle.source_depths
        a, b = views[0], views[1]
        K = a.intrinsics
        from geovox.geometry import image_rays
        o, d = image_rays(K, a.pose)
        pts = (o + d * depths[0][..., None]).reshape(-1, 3)
        uv, zb, valid = project_points(pts, K, b.pose)
        ub, vb = np.round(uv[:, 0]).astype(int), np.round(uv[:, 1]).astype(int)
        # keep points that are the visible surface in view b and project near a pixel centre
        ok = valid & (np.abs(uv - np.round(uv)).max(1) < 0.05)
        ok[ok] &= np.abs(np.linalg.norm(pts[ok] - b.pose.center, axis=1)
                         - depths[1][vb[ok], ub[ok]]) < 1e-3
        assert ok.sum() > 0
        # nearest pixel may straddle an edge; require the large majority to match exactly
        match = np.all(a.image.reshape(-1, 3)[ok] == b.image[vb[ok], ub[ok]], axis=1)
        assert match.mean() > 0.95

    def test_depth_occupancy_consistency(self, bundle):
        from geovox.geometry import image_rays
        view, depth = bundle.source_views[0], bundle.source_depths[0]
        o, d = image_rays(view.intrinsics, view.pose)
        pts = (o + d * depth[..., None]).reshape(-1, 3)
        spec = bundle.spec
        on_wall = np.any((np.abs(pts - spec.room_min) < 1e-4) | (np.abs(pts - spec.room_max) < 1e-4), 1)
        on_box = np.zeros(len(pts), bool)
        for b in spec.boxes:
            on_box |= np.all((pts >= b.min - 1e-4) & (pts <= b.max + 1e-4), 1)
        assert np.all(on_wall | on_box)


class TestOccupancy:
    def test_empty_room(self):
        spec = one_box_room()
        spec.objects = []
        assert occupancy_grid(spec, default_grid(spec)).sum() == 0

    def test_brute_force(self):
        spec = generate_scene(3)
        grid = default_grid(spec)
        occ = occupancy_grid(spec, grid)
        assert occ.shape == grid.shape
        for flat, c in enumerate(voxel_centers(grid)):
            inside = any(all(b.min[a] <= c[a] <= b.max[a] for a in range(3)) for b in spec.boxes)
            i, j, k = flat % grid.nx, (flat // grid.nx) % grid.ny, flat // (grid.nx * grid.ny)
            assert occ[i, j, k] == inside


class TestBundleIO:
    def test_round_trip(self, bundle, tmp_path):
        save_bundle(bundle, tmp_path / "s")
        back = load_bundle(tmp_path / "s")
        assert len(back.source_views) == len(bundle.source_views)
        assert len(back.novel_views) == len(bundle.novel_views)
        for a, b in zip(bundle.views, back.views):
            assert_array_equal(a.image, b.image)
            assert_array_equal(a.pose.matrix, b.pose.matrix)
        for a, b in zip(bundle.depth_maps, back.depth_maps):
            assert_array_equal(a, b)
        assert_array_equal(bundle.occupancy, back.occupancy)
        assert back.grid == bundle.grid
        assert_array_equal(back.boxes[0].center, bundle.boxes[0].center)

    def test_raw_layouts(self, bundle, tmp_path):
        out = save_bundle(bundle, tmp_path / "s")
        raw = np.fromfile(out / "occupancy.u8", dtype=np.uint8)
        g = bundle.grid
        assert raw[g.flat_index(2, 3, 1)] == bundle.occupancy[2, 3, 1]
        d = np.fromfile(out / "depth_000.f32", dtype="<f4")
        assert d.size == bundle.source_depths[0].size
        assert d[5] == np.float32(bundle.source_depths[0].ravel()[5])

    def test_bad_format(self, bundle, tmp_path):
        out = save_bundle(bundle, tmp_path / "s")
        (out / "scene.json").write_text((out / "scene.json").read_text().replace("geovox-scene/1", "x"))
        with pytest.raises(ValueError):
            load_bundle(out)
