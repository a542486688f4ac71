from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import poses
from dynscene.geometry import Pose, StereoCamera, triangulate_many
from dynscene.motion import (CameraTrajectory, LabelPairs, LabelWindow, associate_labels,
                             compose_global_object_pose, compute_t_init, ego_from_global,
                             identify_camera_model, update_camera, update_object_models)
from dynscene.scenes import corridor_camera, multi_object_scene
from dynscene.segmentation import MotionSegmentation, NoModelsFound, SegmentModel
from dynscene.sim import ObjectSpec, SceneSpec, generate_sequence
from dynscene.tracking import MotionTracker, make_pairs

A, B = 1, 2


def _window(history, weights=None):
    """``history`` lists per-frame labels of one track (id 7), oldest first."""
    w = LabelWindow(len(history) + 1, weights=weights)
    w.entries = deque(({7: lab} for lab in history), maxlen=len(history))
    return w


# -------------------------------------------------------------- label association


def test_consistent_label_wins():
    assert associate_labels(_window([A, A, A]), {7: A}) == {7: A}


def test_weighted_vote_hand_example():
    # ages 0..3 carry weights 4, 3, 2, 1: A at ages 0 and 2 (6), B at ages 1 and 3 (4)
    w = _window([B, A, B])
    assert w.weights == (4.0, 3.0, 2.0, 1.0)
    assert associate_labels(w, {7: A}) == {7: A}


def test_tie_goes_to_smaller_label():
    # A: 4 + 1, B: 3 + 2
    assert associate_labels(_window([A, B, B]), {7: A}) == {7: A}
    assert associate_labels(_window([B, A, A]), {7: B}) == {7: A}


def test_unseen_track_keeps_its_segmentation_label():
    w = _window([A, A, A])
    assert associate_labels(w, {7: A, 9: B, 11: -1}) == {7: A, 9: B, 11: -1}


def test_window_weights_must_decrease():
    with pytest.raises(ValueError):
        LabelWindow(3, weights=(1.0, 2.0, 3.0))


@given(st.lists(st.integers(0, 3), min_size=3, max_size=3), st.integers(0, 3),
       st.floats(0.01, 1000.0))
def test_vote_is_invariant_to_weight_scale(history, current, scale):
    base = _window(history)
    scaled = _window(history, weights=tuple(scale * x for x in base.weights))
    assert associate_labels(base, {7: current}) == associate_labels(scaled, {7: current})


# -------------------------------------------------------------- camera identification


def _seg(sizes):
    labels, models, start = [], [], 0
    for lab, n in sizes:
        models.append(SegmentModel(lab, Pose.identity(), np.arange(start, start + n)))
        labels += [lab] * n
        start += n
    return MotionSegmentation(np.array(labels), models)


def test_single_model_is_the_camera():
    assert identify_camera_model(_seg([(3, 40)])) == 3


def test_majority_model_is_the_camera():
    assert identify_camera_model(_seg([(1, 60), (2, 500)])) == 2


def test_camera_tie_broken_by_spatial_extent():
    rng = np.random.default_rng(0)
    small = rng.uniform(-0.1, 0.1, (50, 3)) + [0, 0, 3]
    large = rng.uniform(-1.0, 1.0, (50, 3)) + [0, 0, 3]
    seg = _seg([(1, 50), (2, 50)])
    assert identify_camera_model(seg, np.vstack([small, large])) == 2
    assert identify_camera_model(seg, np.vstack([large, small])) == 1
    assert identify_camera_model(seg) == 1  # no geometry: smaller label


def test_no_models():
    with pytest.raises(NoModelsFound):
        identify_camera_model(MotionSegmentation(np.zeros(0, int), []))


# -------------------------------------------------------------- camera tracking


def _wall(rng, n=200):
    return rng.uniform(-2, 2, (n, 3)) * [1, 1, 0.5] + [0, 0, 5]


def test_static_camera_has_identity_increments():
    rng = np.random.default_rng(1)
    P = _wall(rng)
    traj = CameraTrajectory()
    for _ in range(5):
        update_camera(traj, P, P, 0.05)
    for T in traj.poses:
        assert T.allclose(Pose.identity(), 1e-12)


def test_advancing_camera_accumulates_translation():
    rng = np.random.default_rng(2)
    world = _wall(rng) + [0, 0, 2]
    traj = CameraTrajectory()
    for t in range(1, 8):
        P = world - [0, 0, 0.1 * (t - 1)]
        Q = world - [0, 0, 0.1 * t]
        update_camera(traj, P, Q, 0.05)
        np.testing.assert_allclose(traj.poses[t].trans, [0, 0, 0.1 * t], atol=1e-9)
        assert traj.poses[t].angle() < 1e-9


def test_camera_loss_holds_pose():
    traj = CameraTrajectory()
    update_camera(traj, np.zeros((2, 3)) + [0, 0, 1], np.zeros((2, 3)) + [0, 0, 1], 0.05)
    assert traj.lost == [False, True]
    assert traj.poses[1].allclose(Pose.identity(), 0)


def _triangulation_cov(cam: StereoCamera, P: np.ndarray, sigma: float) -> np.ndarray:
    # first-order covariance of stereo triangulation w.r.t. (ul, vl, ur)
    x, y, z = P.T
    fb = cam.fx * cam.baseline
    dz_dul, dz_dur = -z ** 2 / fb, z ** 2 / fb
    J = np.zeros((len(P), 3, 3))
    J[:, 2, 0], J[:, 2, 2] = dz_dul, dz_dur
    J[:, 0, 0], J[:, 0, 2] = z / cam.fx + x / z * dz_dul, x / z * dz_dur
    J[:, 1, 1], J[:, 1, 0], J[:, 1, 2] = z / cam.fy, y / z * dz_dul, y / z * dz_dur
    return sigma ** 2 * np.einsum("nij,nkj->nik", J, J)


def _translation_sigma(cam, P, Q, sigma):
    """Std of the least-squares translation obtained by linear error propagation."""
    S = np.zeros((len(P), 3, 3))
    S[:, 0, 1], S[:, 0, 2], S[:, 1, 2] = -P[:, 2], P[:, 1], -P[:, 0]
    S -= S.transpose(0, 2, 1)
    A = np.concatenate([-S, np.broadcast_to(np.eye(3), S.shape)], axis=2)
    C = _triangulation_cov(cam, P, sigma) + _triangulation_cov(cam, Q, sigma)
    Hinv = np.linalg.inv(np.einsum("nji,njk->ik", A, A))
    cov = Hinv @ np.einsum("nji,njk,nkl->il", A, C, A) @ Hinv
    return float(np.sqrt(np.trace(cov[3:, 3:])))


def test_noisy_camera_increment_within_propagated_bound():
    cam = corridor_camera()
    n = 15
    spec = SceneSpec(camera=cam, camera_trajectory=[Pose.from_translation([0, 0, 0.1 * k]) for k in range(n)],
                     static_point_count=4000, static_bounds=((-1.5, -1.2, -1), (1.5, 1.2, 12)),
                     pixel_noise_sigma=0.5, rng_seed=3, max_depth=6.0)
    frames, _ = generate_sequence(spec, with_grids=False)
    for k in range(1, n):
        fp = make_pairs(cam, frames[k - 1], frames[k])
        traj = update_camera(CameraTrajectory(), fp.P, fp.Q, 0.3, seed=k)
        err = np.linalg.norm(traj.poses[1].trans - [0, 0, 0.1])
        assert err < 3 * _translation_sigma(cam, fp.P, fp.Q, 0.5), k


# -------------------------------------------------------------- global composition


def test_t_init_examples():
    assert compute_t_init([[1, 2, 3]], Pose.identity()).allclose(Pose.from_translation([1, 2, 3]), 0)
    sym = np.array([[1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0]], dtype=float)
    assert compute_t_init(sym, Pose.identity()).allclose(Pose.identity(), 1e-12)
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(20, 3))
    T = Pose.from_axis_angle([1, 0, 1], 0.8, [3, -1, 2])
    got = compute_t_init(pts, T)
    np.testing.assert_allclose(got.trans, T.apply(pts.mean(axis=0)), atol=1e-12)
    assert got.angle() == 0.0


def test_static_object_has_identity_global_pose():
    for k in range(5):
        T_C = Pose.from_axis_angle([0, 1, 0], 0.1 * k, [0.2 * k, 0, 0.3 * k])
        assert compose_global_object_pose(T_C, T_C, Pose.identity()).allclose(Pose.identity(), 1e-12)


def test_static_camera_translating_object():
    # apparent motion +x each frame; egocentric pose composes inverse apparent motions
    step = Pose.from_translation([1.0, 0, 0])
    ego = Pose.identity()
    for t in range(1, 6):
        ego = ego.compose(step.inverse())
        got = compose_global_object_pose(Pose.identity(), ego, Pose.identity())
        cumulative = Pose.identity()
        for _ in range(t):
            cumulative = cumulative.compose(step.inverse())
        assert got.allclose(cumulative.inverse(), 1e-12)
        np.testing.assert_allclose(got.trans, [t, 0, 0], atol=1e-12)


@given(poses(), poses(), poses())
def test_global_pose_round_trips_to_egocentric(T_C, ego, t_init):
    T_M = compose_global_object_pose(T_C, ego, t_init)
    back = ego_from_global(T_C, T_M, t_init)
    np.testing.assert_allclose(back.matrix(), ego.matrix(), atol=1e-9)


# -------------------------------------------------------------- object models


def _object_pairs(pts_world, T_prev, T_curr, cam_prev, cam_curr, ids):
    P = cam_prev.inverse().apply(T_prev.apply(pts_world))
    Q = cam_curr.inverse().apply(T_curr.apply(pts_world))
    return LabelPairs(np.asarray(ids), P, Q)


def _run_models(obj_traj, cam_traj, pts):
    camera = CameraTrajectory(poses=[cam_traj[0]], lost=[False])
    models = {}
    for k in range(1, len(cam_traj)):
        camera.poses.append(cam_traj[k])
        camera.lost.append(False)
        lp = _object_pairs(pts, obj_traj[k - 1], obj_traj[k], cam_traj[k - 1], cam_traj[k],
                           np.arange(len(pts)))
        update_object_models(models, {1: lp}, camera, k, 0.05, spawn={1})
    return models[1]


def test_translating_object_trajectory_is_exact():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.3, 0.3, (40, 3))
    obj = [Pose.from_translation([0.05 * k, 0, 3]) for k in range(10)]
    cams = [Pose.identity()] * 10
    m = _run_models(obj, cams, pts)
    assert m.birth_frame == 0 and m.frames == list(range(10))
    for k in m.frames:
        moved = m.pose_at(k).compose(m.t_init)  # rigid displacement since birth
        np.testing.assert_allclose(moved.trans, [0.05 * k, 0, 0], atol=1e-9)
    assert not any(m.coasting)
    # ego cumulative is the ordered product of increments
    acc = m.ego_increments[0]
    for inc, cum in zip(m.ego_increments[1:], m.ego_cumulative[1:]):
        acc = acc.compose(inc)
        assert acc.allclose(cum, 1e-9)


def test_background_attached_object_keeps_constant_pose():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-0.3, 0.3, (40, 3)) + [0, 0, 4]
    still = [Pose.identity()] * 8
    cams = [Pose.from_axis_angle([0, 1, 0], 0.05 * k, [0.1 * k, 0, 0.2 * k]) for k in range(8)]
    m = _run_models(still, cams, pts)
    for k in m.frames:
        assert m.pose_at(k).allclose(m.t_init.inverse(), 1e-9)


def test_gravity_center_is_running_mean():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.3, 0.3, (30, 3))
    obj = [Pose.from_translation([0.1 * k, 0, 3]) for k in range(4)]
    m = _run_models(obj, [Pose.identity()] * 4, pts)
    # every frame re-observes the same points, mapped back to their birth positions
    np.testing.assert_allclose(m.gravity_center, obj[0].apply(pts).mean(axis=0), atol=1e-9)


def test_model_coasts_then_retires():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-0.3, 0.3, (30, 3))
    obj = [Pose.from_translation([0.1 * k, 0, 3]) for k in range(3)]
    camera = CameraTrajectory()
    models = {}
    for k in range(1, 3):
        camera.poses.append(Pose.identity())
        camera.lost.append(False)
        lp = _object_pairs(pts, obj[k - 1], obj[k], Pose.identity(), Pose.identity(), np.arange(30))
        update_object_models(models, {1: lp}, camera, k, 0.05, spawn={1})
    for k in range(3, 3 + 4):
        camera.poses.append(Pose.identity())
        camera.lost.append(False)
        update_object_models(models, {}, camera, k, 0.05, coast_limit=4)
    m = models[1]
    assert m.coasting[-4:] == [True] * 4 and m.retired
    # constant velocity keeps the same per-frame step
    np.testing.assert_allclose(m.pose_at(6).compose(m.t_init).trans, [0.6, 0, 0], atol=1e-9)


# -------------------------------------------------------------- tracker scenarios


def _track(spec):
    frames, _ = generate_sequence(spec, with_grids=False)
    tracker = MotionTracker(spec.camera)
    for f in frames:
        tracker.step(f)
    return frames, tracker


def _room(objects, n, cam_traj=None):
    cam_traj = cam_traj or [Pose.from_translation([0.01 * k, 0, 0.02 * k]) for k in range(n)]
    return SceneSpec(camera=corridor_camera(), camera_trajectory=cam_traj, objects=objects,
                     static_point_count=3000, static_bounds=((-2, -1.5, -1), (2, 1.5, 6)))


def test_object_resumes_label_after_leaving_view():
    n = 30
    traj = [Pose.from_translation([30.0 if 12 <= k < 15 else 0.5 * np.sin(0.3 * k),
                                   0.4 * np.cos(0.3 * k), 2.5]) for k in range(n)]
    box = ObjectSpec(1, 400, (0.6, 0.6, 0.6), traj)
    _, tracker = _track(_room([box], n))
    labels = set()
    for r in tracker.results[5:]:
        labels |= set(r.labels[r.gt_labels == 1].tolist())
    assert labels == {1}
    assert list(tracker.models) == [1]
    m = tracker.models[1]
    assert [f for f, c in zip(m.frames, m.coasting) if c] == [12, 13, 14, 15]


def test_static_object_folds_into_background():
    box = ObjectSpec(1, 400, (0.6, 0.6, 0.6), [Pose.from_translation([0.2, 0, 2.5])] * 12)
    _, tracker = _track(_room([box], 12))
    assert not tracker.models
    for r in tracker.results[1:]:
        assert (r.labels == 0).all()


def test_camera_pose_maps_static_points_to_global_frame():
    spec = multi_object_scene(frame_count=12)
    frames, tracker = _track(spec)
    for f in frames:
        T_C = tracker.trajectory.poses[f.frame_index]
        pts, _ = triangulate_many(spec.camera, f.left_px, f.right_px)
        bg = f.gt_labels == 0
        assert np.abs(T_C.apply(pts[bg]) - f.gt_points[bg]).max() < 1e-9


def test_labels_stay_stable_on_a_noiseless_sequence():
    spec = multi_object_scene(frame_count=25)
    _, tracker = _track(spec)
    owner = {}
    for r in tracker.results[4:]:
        for gt in (1, 2):
            # tracks the segmentation left out carry -1, which is not a model label
            got = set(r.labels[r.gt_labels == gt].tolist()) - {-1}
            assert len(got) == 1
            lab = got.pop()
            assert lab == owner.setdefault(gt, lab)
    assert 0 not in owner.values()
    assert len(set(owner.values())) == 2
