import numpy as np
import pytest

from dynscene.geometry import (BehindCamera, OutOfImage, Pose, StereoCamera, project_stereo,
                               triangulate_many)
from dynscene.sim import EmptyScene, ObjectSpec, SceneSpec, generate_sequence, render_label_grid

SMALL_CAM = StereoCamera(fx=200.0, fy=200.0, cx=79.5, cy=59.5, baseline=0.2,
                         image_width=160, image_height=120)


def _static_scene(frames=4, sigma=0.0, seed=0, objects=(), traj=None):
    traj = traj or [Pose.identity()] * frames
    return SceneSpec(camera=SMALL_CAM, camera_trajectory=traj, objects=list(objects),
                     static_point_count=600, static_bounds=((-2, -1.5, -1), (2, 1.5, 6)),
                     pixel_noise_sigma=sigma, rng_seed=seed)


def _box(label, traj, extent=(0.6, 0.6, 0.6), n=200):
    return ObjectSpec(label=label, point_count=n, extent=extent, trajectory=traj)


# -------------------------------------------------------------- project_stereo


def test_optical_axis_projects_to_principal_point(cam):
    left, right = project_stereo(cam, Pose.identity(), [0.0, 0.0, 3.0])
    np.testing.assert_allclose(left, [cam.cx, cam.cy])
    assert right[1] == left[1]


def test_disparity_matches_pinhole_formula(cam):
    left, right = project_stereo(cam, Pose.identity(), [0.0, 0.0, 2.0])
    assert left[0] - right[0] == pytest.approx(500 * 0.12 / 2.0, abs=1e-12)


def test_projection_errors(cam):
    with pytest.raises(BehindCamera):
        project_stereo(cam, Pose.identity(), [0.0, 0.0, -1.0])
    with pytest.raises(OutOfImage):
        project_stereo(cam, Pose.identity(), [50.0, 0.0, 1.0])


# -------------------------------------------------------------- sequences


def test_static_camera_gives_constant_pixels():
    frames, _ = generate_sequence(_static_scene(), with_grids=False)
    ref = frames[0]
    assert len(ref) > 50
    for f in frames[1:]:
        assert np.array_equal(f.track_ids, ref.track_ids)
        assert np.array_equal(f.left_px, ref.left_px)
        assert np.array_equal(f.right_px, ref.right_px)


def test_disparity_grows_as_camera_approaches():
    traj = [Pose.from_translation([0, 0, 0.2 * k]) for k in range(8)]
    spec = SceneSpec(camera=SMALL_CAM, camera_trajectory=traj, static_point_count=1,
                     static_bounds=((-0.01, -0.01, 5.0), (0.01, 0.01, 5.02)))
    frames, _ = generate_sequence(spec, with_grids=False)
    disp = []
    for f in frames:
        assert len(f) == 1
        disp.append(f.left_px[0, 0] - f.right_px[0, 0])
    assert all(b > a for a, b in zip(disp, disp[1:]))


def test_generation_is_deterministic():
    traj = [Pose.from_axis_angle([0, 1, 0], 0.02 * k, [0.05 * k, 0, 0.1 * k]) for k in range(5)]
    obj = _box(1, [Pose.from_translation([0.3 * np.sin(k), 0, 3]) for k in range(5)])
    a, ga = generate_sequence(_static_scene(traj=traj, sigma=0.5, objects=[obj]))
    b, gb = generate_sequence(_static_scene(traj=traj, sigma=0.5, objects=[obj]))
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.track_ids, fb.track_ids)
        assert np.array_equal(fa.left_px, fb.left_px)
        assert np.array_equal(fa.right_px, fb.right_px)
    for x, y in zip(ga, gb):
        assert np.array_equal(x.depth, y.depth) and np.array_equal(x.labels, y.labels)


def test_noise_has_configured_sigma():
    clean, _ = generate_sequence(_static_scene(frames=2), with_grids=False)
    noisy, _ = generate_sequence(_static_scene(frames=2, sigma=0.5), with_grids=False)
    diff = np.concatenate([noisy[0].left_px - clean[0].left_px, noisy[0].right_px - clean[0].right_px])
    assert np.std(diff) == pytest.approx(0.5, rel=0.1)
    assert abs(np.mean(diff)) < 0.05


def test_empty_scene_raises():
    traj = [Pose.from_translation([0, 0, 0])] * 2
    spec = SceneSpec(camera=SMALL_CAM, camera_trajectory=traj, static_point_count=10,
                     static_bounds=((-1, -1, -5), (1, 1, -4)))
    with pytest.raises(EmptyScene):
        generate_sequence(spec, with_grids=False)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(camera=SMALL_CAM, camera_trajectory=[Pose.identity()])
    with pytest.raises(ValueError):
        _static_scene(sigma=-1.0)
    with pytest.raises(ValueError):
        _static_scene(frames=3, objects=[_box(1, [Pose.identity()] * 2)])


def test_noiseless_tracks_triangulate_to_generating_points():
    traj = [Pose.from_axis_angle([0, 1, 0], 0.03 * k, [0.1 * k, 0.02 * k, 0.15 * k]) for k in range(6)]
    obj = _box(1, [Pose.from_axis_angle([1, 1, 0], 0.1 * k, [0.2, 0, 3]) for k in range(6)])
    spec = _static_scene(traj=traj, objects=[obj])
    frames, _ = generate_sequence(spec, with_grids=False)
    for f in frames:
        pts, ok = triangulate_many(SMALL_CAM, f.left_px, f.right_px)
        assert ok.all()
        world = f.gt_camera_pose.apply(pts)
        assert np.abs(world - f.gt_points).max() < 1e-9


def test_track_labels_and_visibility_constraints():
    traj = [Pose.from_translation([0.05 * k, 0, 0.1 * k]) for k in range(10)]
    obj = _box(3, [Pose.from_translation([0.1 * k - 0.3, 0, 3]) for k in range(10)])
    frames, _ = generate_sequence(_static_scene(traj=traj, objects=[obj]), with_grids=False)
    seen = {}
    for f in frames:
        assert len(np.unique(f.track_ids)) == len(f)
        for px in (f.left_px, f.right_px):
            assert SMALL_CAM.in_image(px[:, 0], px[:, 1]).all()
        for tid, lab in zip(f.track_ids.tolist(), f.gt_labels.tolist()):
            assert seen.setdefault(tid, lab) == lab
    assert 3 in set(seen.values()) and 0 in set(seen.values())


# -------------------------------------------------------------- label grids


def test_grid_without_objects_is_all_background():
    g = render_label_grid(_static_scene(), 0)
    assert (g.labels == 0).all()
    assert (g.depth > 0).all()


def test_grid_object_occludes_background():
    obj = _box(2, [Pose.from_translation([0, 0, 2.0])] * 4)
    spec = _static_scene(objects=[obj])
    g = render_label_grid(spec, 0)
    bare = render_label_grid(_static_scene(), 0)
    c = (int(SMALL_CAM.cy), int(SMALL_CAM.cx))
    assert g.labels[c] == 2
    # the front face of the box sits at z = 1.7
    assert g.depth[c] == pytest.approx(1.7, abs=1e-9)
    assert g.depth[c] < bare.depth[c]


def test_grid_mask_area_falls_with_distance():
    near = _box(1, [Pose.from_translation([0, 0, 2.0])] * 2, extent=(0.5, 0.5, 0.01))
    far = _box(1, [Pose.from_translation([0, 0, 4.0])] * 2, extent=(0.5, 0.5, 0.01))
    a_near = np.count_nonzero(render_label_grid(_static_scene(frames=2, objects=[near]), 0).labels == 1)
    a_far = np.count_nonzero(render_label_grid(_static_scene(frames=2, objects=[far]), 0).labels == 1)
    assert a_far / a_near == pytest.approx(0.25, rel=0.1)


def test_grid_depth_agrees_with_tracked_features():
    # the back wall is fronto-parallel, so its depth is the same along every ray it covers
    quantum = 1e-3
    spec = SceneSpec(camera=SMALL_CAM, camera_trajectory=[Pose.identity()] * 2,
                     static_point_count=3000, static_bounds=((-2, -1.5, -1), (2, 1.5, 6)),
                     depth_quantum=quantum)
    frames, _ = generate_sequence(spec, with_grids=False)
    g = render_label_grid(spec, 0)
    f = frames[0]
    pts, _ = triangulate_many(SMALL_CAM, f.left_px, f.right_px)
    wall = np.abs(pts[:, 2] - 6.0) < 1e-9
    assert wall.sum() > 20
    iu = np.rint(f.left_px[wall, 0]).astype(int)
    iv = np.rint(f.left_px[wall, 1]).astype(int)
    inner = np.abs(g.depth[iv, iu] - 6.0) < 0.1  # drop pixels straddling a wall edge
    assert inner.mean() > 0.9
    err = np.abs(g.depth[iv, iu][inner] - pts[wall, 2][inner])
    assert err.max() <= quantum / 2 + 1e-12
