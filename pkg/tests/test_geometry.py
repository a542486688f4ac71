import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import poses, rz, rz_matrix, vec3
from dynscene.geometry import (DegenerateGeometry, EpipolarViolation, NonPositiveDisparity, Pose,
                               estimate_rigid_alignment, pose_compose, pose_inverse,
                               project_stereo, random_pose, ransac_rigid, residuals,
                               transform_point, triangulate)


def test_identity_compose_is_neutral():
    T = Pose.from_axis_angle([1, 2, 3], 0.7, [1, -2, 0.5])
    assert pose_compose(Pose.identity(), T).allclose(T, 1e-12)
    assert pose_compose(T, Pose.identity()).allclose(T, 1e-12)


def test_compose_with_inverse_is_identity():
    T = Pose.from_axis_angle([0.3, -1, 2], 2.1, [4, 5, -6])
    assert pose_compose(T, pose_inverse(T)).allclose(Pose.identity(), 1e-9)


def test_rz90_twice_matches_matrix_product():
    expected = rz(90).matrix() @ rz(90).matrix()
    got = pose_compose(rz(90), rz(90))
    np.testing.assert_allclose(got.matrix(), expected, atol=1e-12)
    np.testing.assert_allclose(got.rotation, rz_matrix(180), atol=1e-12)


def test_compose_order_applies_right_operand_first():
    a, b = rz(90), Pose.from_translation([1, 0, 0])
    p = np.array([0.5, 0.2, -1.0])
    np.testing.assert_allclose(pose_compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


def test_inverse_examples():
    assert pose_inverse(Pose.identity()).allclose(Pose.identity(), 1e-12)
    np.testing.assert_allclose(pose_inverse(Pose.from_translation([1, 2, 3])).trans, [-1, -2, -3])
    inv = pose_inverse(rz(90, (1, 0, 0)))
    M = np.linalg.inv(rz(90, (1, 0, 0)).matrix())
    np.testing.assert_allclose(inv.matrix(), M, atol=1e-12)
    np.testing.assert_allclose(inv.trans, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(inv.rotation, rz_matrix(-90), atol=1e-12)


def test_transform_point_examples():
    np.testing.assert_allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(transform_point(Pose.from_translation([0, 0, 5]), [0, 0, 0]), [0, 0, 5])
    np.testing.assert_allclose(transform_point(rz(90), [1, 0, 0]), [0, 1, 0], atol=1e-12)


@given(poses(), poses(), poses())
def test_compose_is_associative(a, b, c):
    left = pose_compose(a, pose_compose(b, c))
    right = pose_compose(pose_compose(a, b), c)
    np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)


@given(poses(), poses())
def test_pose_invariants_after_operations(a, b):
    for T in (a, b, pose_compose(a, b), pose_inverse(a)):
        assert abs(np.linalg.norm(T.quat) - 1.0) < 1e-9
        R = T.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(poses(), vec3, vec3)
def test_transform_preserves_distances(T, p, q):
    d0 = np.linalg.norm(p - q)
    d1 = np.linalg.norm(transform_point(T, p) - transform_point(T, q))
    assert abs(d0 - d1) < 1e-9


# -------------------------------------------------------------- alignment


def _cloud(rng, n=10):
    return rng.uniform(-1, 1, (n, 3)) + [0, 0, 4]


def test_alignment_identity_and_translation():
    rng = np.random.default_rng(1)
    P = _cloud(rng)
    assert estimate_rigid_alignment((P, P)).allclose(Pose.identity(), 1e-12)
    T = estimate_rigid_alignment((P, P + [0, 0, 1]))
    assert T.allclose(Pose.from_translation([0, 0, 1]), 1e-12)


def test_alignment_recovers_known_motion():
    rng = np.random.default_rng(2)
    truth = random_pose(rng)
    P = _cloud(rng)
    T = estimate_rigid_alignment((P, truth.apply(P)))
    np.testing.assert_allclose(T.matrix(), truth.matrix(), atol=1e-9)


def test_alignment_rejects_degenerate_input():
    with pytest.raises(DegenerateGeometry):
        estimate_rigid_alignment((np.zeros((2, 3)), np.zeros((2, 3))))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0]) + [0, 0, 1]
    with pytest.raises(DegenerateGeometry):
        estimate_rigid_alignment((line, line))


def test_alignment_is_a_grid_minimum():
    # brute force: no twist on a small grid around the solution does better
    rng = np.random.default_rng(3)
    P = _cloud(rng, 6)
    Q = random_pose(rng).apply(P) + rng.normal(0, 0.05, P.shape)
    w = rng.uniform(0.5, 2.0, len(P))
    T = estimate_rigid_alignment((P, Q), w)
    cost = lambda X: float(np.sum(w * np.sum((Q - X.apply(P)) ** 2, axis=1)))
    base = cost(T)
    step = 2e-3
    for d in itertools.product((-step, 0, step), repeat=6):
        twist = Pose.from_rotvec(np.array(d[:3]), np.array(d[3:]))
        assert cost(twist.compose(T)) >= base - 1e-12


@given(st.integers(0, 10_000))
def test_alignment_twist_perturbation_never_helps(seed):
    rng = np.random.default_rng(seed)
    P = _cloud(rng, 8)
    Q = random_pose(rng).apply(P) + rng.normal(0, 0.02, P.shape)
    w = rng.uniform(0.1, 1.0, len(P))
    T = estimate_rigid_alignment((P, Q), w)
    cost = lambda X: float(np.sum(w * np.sum((Q - X.apply(P)) ** 2, axis=1)))
    twist = rng.normal(size=6)
    twist *= 1e-3 / np.linalg.norm(twist)
    perturbed = Pose.from_rotvec(twist[:3], twist[3:]).compose(T)
    assert cost(perturbed) >= cost(T) - 1e-12


# -------------------------------------------------------------- RANSAC


def test_ransac_exact_rigid_set():
    rng = np.random.default_rng(4)
    truth = random_pose(rng)
    P = _cloud(rng, 30)
    T, inl = ransac_rigid((P, truth.apply(P)), 0.05, seed=0)
    assert list(inl) == list(range(30))
    np.testing.assert_allclose(T.matrix(), truth.matrix(), atol=1e-9)


def test_ransac_separates_outliers():
    rng = np.random.default_rng(5)
    truth = random_pose(rng, max_angle=0.5)
    P = _cloud(rng, 100)
    Q = truth.apply(P)
    out = rng.choice(100, 20, replace=False)
    Q[out] = rng.uniform(-3, 3, (20, 3)) + [0, 0, 4]
    # keep only outliers that are genuinely off-model
    far = residuals(truth, P[out], Q[out]) > 0.05
    assert far.all()
    T, inl = ransac_rigid((P, Q), 0.05, max_iterations=500, seed=7)
    assert set(inl) == set(range(100)) - set(out)
    np.testing.assert_allclose(T.matrix(), truth.matrix(), atol=1e-6)


def test_ransac_minimal_sample():
    rng = np.random.default_rng(6)
    truth = random_pose(rng)
    P = _cloud(rng, 3)
    T, inl = ransac_rigid((P, truth.apply(P)), 0.01)
    assert list(inl) == [0, 1, 2]
    np.testing.assert_allclose(T.apply(P), truth.apply(P), atol=1e-9)


def test_ransac_no_consensus():
    P = np.zeros((2, 3)) + [0, 0, 1]
    with pytest.raises(DegenerateGeometry):
        ransac_rigid((P, P), 0.1)


@given(st.integers(0, 10_000))
def test_ransac_deterministic_for_seed(seed):
    rng = np.random.default_rng(seed)
    P = _cloud(rng, 40)
    Q = random_pose(rng).apply(P)
    Q[:10] += rng.normal(0, 1.0, (10, 3))
    a = ransac_rigid((P, Q), 0.05, seed=seed)
    b = ransac_rigid((P, Q), 0.05, seed=seed)
    assert np.array_equal(a[1], b[1])
    assert np.array_equal(a[0].quat, b[0].quat) and np.array_equal(a[0].trans, b[0].trans)


# -------------------------------------------------------------- stereo


def test_triangulate_principal_point_example(cam):
    # d = 60 px, fx = 500, baseline = 0.12 -> z = 1 m; x back-projects from the left pixel
    left = np.array([cam.cx + 60.0, cam.cy])
    right = np.array([cam.cx, cam.cy])
    p = triangulate(cam, left, right)
    assert p[2] == pytest.approx(1.0, abs=1e-12)
    assert p[0] == pytest.approx(60.0 * 1.0 / 500.0, abs=1e-12)
    assert p[1] == pytest.approx(0.0, abs=1e-12)


def test_triangulate_errors(cam):
    with pytest.raises(NonPositiveDisparity):
        triangulate(cam, [100.0, 50.0], [100.0, 50.0])
    with pytest.raises(EpipolarViolation):
        triangulate(cam, [100.0, 50.0], [90.0, 52.0])


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 50.0))
def test_triangulate_inverts_projection(cam, fx_, fy_, z):
    # keep the point inside both views at every depth
    x = fx_ * 0.25 * z
    y = fy_ * 0.2 * z
    p = np.array([x, y, z])
    left, right = project_stereo(cam, Pose.identity(), p)
    back = triangulate(cam, left, right)
    assert np.linalg.norm(back - p) < 1e-9
