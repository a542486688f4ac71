import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from dynscene.geometry import Pose, StereoCamera

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow,
                                                 HealthCheck.function_scoped_fixture])
settings.load_profile("default")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def poses(draw, max_trans: float = 5.0):
    axis = draw(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)))
    if np.linalg.norm(axis) < 1e-3:
        axis = (0.0, 0.0, 1.0)
    angle = draw(st.floats(0.0, math.pi))
    t = draw(st.tuples(*[st.floats(-max_trans, max_trans)] * 3))
    return Pose.from_axis_angle(axis, angle, t)


def rz(deg: float, t=(0.0, 0.0, 0.0)) -> Pose:
    return Pose.from_axis_angle([0, 0, 1], math.radians(deg), t)


def rz_matrix(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def cam():
    return StereoCamera(fx=500.0, fy=500.0, cx=319.5, cy=239.5, baseline=0.12,
                        image_width=640, image_height=480)


_CENTERS = [(0.0, 0.0, 4.0), (-1.2, 0.6, 3.0), (1.2, 0.6, 3.0), (0.0, -0.8, 3.0)]


def k_motion_scene(seed: int, k: int, per_motion: int = 40, separation: float = 0.3):
    """Camera-frame pairs for ``k`` rigid motions; motion 0 is a wide background blob.

    Object motions are redrawn until every point is at least ``separation``
    metres away from where any other motion would put it.
    """
    from dynscene.geometry import residuals

    rng = np.random.default_rng(seed)
    blobs = []
    for i in range(k):
        n = per_motion * (3 if i == 0 else 1)
        half = np.array([2.0, 2.0, 1.0]) if i == 0 else np.full(3, 0.3)
        blobs.append(np.asarray(_CENTERS[i]) + rng.uniform(-1, 1, (n, 3)) * half)
    while True:
        motions = [Pose.from_axis_angle(rng.normal(size=3), 0.02, rng.uniform(-0.05, 0.05, 3))]
        for _ in range(1, k):
            motions.append(Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0.1, 0.3),
                                                rng.uniform(-0.3, 0.3, 3)))
        ok = all(residuals(motions[j], blobs[i], motions[i].apply(blobs[i])).min() > separation
                 for i in range(k) for j in range(k) if i != j)
        if ok:
            break
    P = np.vstack(blobs)
    Q = np.vstack([T.apply(b) for T, b in zip(motions, blobs)])
    labels = np.concatenate([np.full(len(b), i) for i, b in enumerate(blobs)])
    return P, Q, labels, motions


_VERDICTS: list = []


@pytest.fixture
def report():
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
