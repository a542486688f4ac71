"""Persistent motion labels, camera tracking and object trajectories.

Conventions (frames are 0-based, the global frame is the camera at frame 0):

* a camera pose ``T_C[t]`` maps camera-``t`` coordinates to global coordinates;
* an *apparent motion* maps a point set from camera ``t-1`` to camera ``t``;
* the egocentric pose of an object is the camera pose expressed relative to the
  object, built by composing inverse apparent motions from the object's birth
  (where it is seeded with the camera pose, so a static object has
  ``ego == T_C``);
* the global object pose is ``T_C @ ego^-1 @ T_init^-1``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import (DegenerateGeometry, Pose, StereoCamera, ransac_rigid,
                       refine_stereo_pose)
from .segmentation import MotionSegmentation, NoModelsFound

STATIC = 0
UNASSIGNED = -1


@dataclass
class LabelWindow:
    """Candidate labels of the previous ``n - 1`` keyframes, oldest first."""

    n: int = 4
    entries: deque = field(default_factory=deque)
    weights: tuple | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("window length must be >= 1")
        w = self.weights if self.weights is not None else tuple(float(self.n - a) for a in range(self.n))
        w = tuple(float(x) for x in w)
        if len(w) != self.n or any(x <= 0 for x in w) or any(a <= b for a, b in zip(w, w[1:])):
            raise ValueError("weights must be positive and strictly decreasing with age")
        self.weights = w
        self.entries = deque(self.entries, maxlen=max(self.n - 1, 0))

    def push(self, labels: dict) -> None:
        if self.n > 1:
            self.entries.append(dict(labels))

    def relabel(self, mapping: dict) -> None:
        for e in self.entries:
            for k, v in e.items():
                if v in mapping:
                    e[k] = mapping[v]


def associate_labels(window: LabelWindow, current: dict) -> dict:
    """Weighted vote of each track's labels over the current frame and the window.

    ``current`` maps track id to its candidate label this frame (``-1`` for
    none). The current frame has age 0. Ties go to the smaller label.
    """
    history = [current] + list(reversed(window.entries))
    history = history[: window.n]
    w = window.weights
    out = {}
    for tid, cand in current.items():
        score = {}
        for age, entry in enumerate(history):
            lab = entry.get(tid)
            if lab is not None and lab >= 0:
                score[lab] = score.get(lab, 0.0) + w[age]
        if score:
            out[tid] = min(score, key=lambda l: (-score[l], l))
        else:
            out[tid] = cand
    return out


def _bbox_volume(points: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    ext = points.max(axis=0) - points.min(axis=0)
    return float(np.prod(ext))


def identify_camera_model(seg: MotionSegmentation, points: np.ndarray | None = None) -> int:
    """Label of the static model: most inliers, then larger bounding box, then smaller label."""
    if not seg.models:
        raise NoModelsFound("no motion models to choose from")

    def key(m):
        vol = _bbox_volume(points[m.inliers]) if points is not None else 0.0
        return (-len(m.inliers), -vol, m.label)

    return min(seg.models, key=key).label


@dataclass
class CameraTrajectory:
    poses: list = field(default_factory=lambda: [Pose.identity()])
    lost: list = field(default_factory=lambda: [False])

    def __post_init__(self):
        if not self.poses[0].allclose(Pose.identity(), 1e-12):
            raise ValueError("the first camera pose must be the identity")

    def __len__(self):
        return len(self.poses)

    @property
    def current(self) -> Pose:
        return self.poses[-1]


@dataclass
class StereoTerms:
    """Pixel measurements used to polish a RANSAC motion (see ``refine_stereo_pose``)."""

    camera: StereoCamera
    pix_prev: np.ndarray  # (N, 4)
    pix_curr: np.ndarray  # (N, 4)
    iterations: int = 10
    huber: float = 2.0


def _estimate_increment(P, Q, threshold, seed, stereo: StereoTerms | None, ransac_iterations=300):
    T, inl = ransac_rigid((P, Q), threshold, ransac_iterations, seed)
    if stereo is not None:
        T = refine_stereo_pose(stereo.camera, T, P[inl], Q[inl], stereo.pix_prev[inl],
                               stereo.pix_curr[inl], stereo.iterations, stereo.huber)
    return T, inl


def update_camera(traj: CameraTrajectory, P: np.ndarray, Q: np.ndarray, threshold: float,
                  seed: int = 0, stereo: StereoTerms | None = None,
                  ransac_iterations: int = 300) -> CameraTrajectory:
    """Append one camera pose estimated from background pairs ``P -> Q``.

    The background appears to move by the inverse of the camera motion. On
    degenerate input the frame is marked lost and the pose is held.
    """
    try:
        if len(P) < 3:
            raise DegenerateGeometry("fewer than 3 background pairs")
        A, _ = _estimate_increment(P, Q, threshold, seed, stereo, ransac_iterations)
        traj.poses.append(traj.current.compose(A.inverse()))
        traj.lost.append(False)
    except DegenerateGeometry:
        traj.poses.append(traj.current)
        traj.lost.append(True)
    return traj


def compute_t_init(object_points: np.ndarray, camera_pose: Pose) -> Pose:
    """Pure translation to the centroid of the object points in the global frame."""
    pts = np.asarray(object_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one object point")
    return Pose.from_translation(camera_pose.apply(pts).mean(axis=0))


def compose_global_object_pose(T_CtC1: Pose, ego_T_MtM1: Pose, t_init: Pose) -> Pose:
    return T_CtC1.compose(ego_T_MtM1.inverse()).compose(t_init.inverse())


def ego_from_global(T_CtC1: Pose, T_MtM1: Pose, t_init: Pose) -> Pose:
    """Invert :func:`compose_global_object_pose` for the egocentric pose."""
    return t_init.inverse().compose(T_MtM1.inverse()).compose(T_CtC1)


@dataclass
class MotionModel:
    label: int
    birth_frame: int
    t_init: Pose
    gravity_center: np.ndarray
    frames: list = field(default_factory=list)
    ego_increments: list = field(default_factory=list)
    ego_cumulative: list = field(default_factory=list)
    global_trajectory: list = field(default_factory=list)
    inliers: list = field(default_factory=list)
    coasting: list = field(default_factory=list)
    center_weight: int = 0
    coast_run: int = 0
    retired: bool = False

    @property
    def last_frame(self) -> int:
        return self.frames[-1]

    def pose_at(self, frame: int) -> Pose:
        return self.global_trajectory[frame - self.birth_frame]

    def displacement(self, k: int = -1) -> Pose:
        """Rigid motion of the object since birth, acting on global coordinates."""
        return self.global_trajectory[k].compose(self.t_init)

    def append(self, frame: int, increment: Pose, camera_pose: Pose, inliers, coasting: bool):
        ego = self.ego_cumulative[-1].compose(increment)
        self.frames.append(frame)
        self.ego_increments.append(increment)
        self.ego_cumulative.append(ego)
        self.global_trajectory.append(compose_global_object_pose(camera_pose, ego, self.t_init))
        self.inliers.append(np.asarray(inliers, dtype=np.int64))
        self.coasting.append(coasting)

    def add_center_points(self, points_birth: np.ndarray) -> None:
        """Running mean of every point ever assigned, in birth-time global coordinates."""
        if len(points_birth) == 0:
            return
        n = self.center_weight
        m = len(points_birth)
        self.gravity_center = (self.gravity_center * n + points_birth.sum(axis=0)) / (n + m)
        self.center_weight = n + m

    def to_birth_coords(self, points_cam: np.ndarray, k: int = -1) -> np.ndarray:
        """Map current-camera points of this object to birth-time global coordinates."""
        return self.ego_cumulative[k].apply(points_cam)


def spawn_model(label: int, frame: int, P_prev: np.ndarray, camera_prev: Pose,
                track_ids=()) -> MotionModel:
    """New model born at ``frame`` from its points in that frame's camera coordinates."""
    t_init = compute_t_init(P_prev, camera_prev)
    m = MotionModel(label=label, birth_frame=frame, t_init=t_init,
                    gravity_center=t_init.trans.copy())
    m.frames.append(frame)
    m.ego_increments.append(camera_prev)
    m.ego_cumulative.append(camera_prev)
    m.global_trajectory.append(compose_global_object_pose(camera_prev, camera_prev, t_init))
    m.inliers.append(np.asarray(track_ids, dtype=np.int64))
    m.coasting.append(False)
    m.add_center_points(camera_prev.apply(P_prev))
    return m


def coast_model(model: MotionModel, frame: int, camera_pose: Pose) -> None:
    """Constant-velocity prediction in the global frame."""
    if len(model.global_trajectory) >= 2:
        D1 = model.displacement(-1)
        D0 = model.displacement(-2)
        D = D1.compose(D0.inverse()).compose(D1)
    else:
        D = model.displacement(-1)
    T_M = D.compose(model.t_init.inverse())
    ego = ego_from_global(camera_pose, T_M, model.t_init)
    inc = model.ego_cumulative[-1].inverse().compose(ego)
    model.append(frame, inc, camera_pose, [], coasting=True)
    model.coast_run += 1


@dataclass
class LabelPairs:
    """Correspondences of one label between two consecutive frames."""

    track_ids: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    stereo: StereoTerms | None = None

    def __len__(self):
        return len(self.track_ids)


def update_object_models(models: dict, label_pairs: dict, camera: CameraTrajectory, frame: int,
                         threshold: float, spawn: set | None = None, coast_limit: int = 10,
                         seed: int = 0, ransac_iterations: int = 300) -> dict:
    """Advance every live object model to ``frame`` (camera pose already appended).

    ``label_pairs`` maps object labels to their :class:`LabelPairs`. Labels in
    ``spawn`` without a model start one, born at ``frame - 1``. Models without
    usable pairs coast and are retired after ``coast_limit`` coasting frames.
    """
    T_C = camera.poses[frame]
    spawn = set() if spawn is None else set(spawn)
    for label in sorted(spawn):
        if label in models or label not in label_pairs or len(label_pairs[label]) < 3:
            continue
        lp = label_pairs[label]
        models[label] = spawn_model(label, frame - 1, lp.P, camera.poses[frame - 1], lp.track_ids)

    for label in sorted(models):
        m = models[label]
        if m.retired or m.last_frame >= frame:
            continue
        lp = label_pairs.get(label)
        inc = None
        if lp is not None and len(lp) >= 3:
            try:
                B, inl = _estimate_increment(lp.P, lp.Q, threshold, seed + label, lp.stereo,
                                             ransac_iterations)
                inc = B.inverse()
            except DegenerateGeometry:
                inc = None
        if inc is None:
            coast_model(m, frame, T_C)
            if m.coast_run >= coast_limit:
                m.retired = True
            continue
        m.coast_run = 0
        m.append(frame, inc, T_C, lp.track_ids[inl], coasting=False)
        m.add_center_points(m.to_birth_coords(lp.Q[inl]))
    return models


@dataclass
class StaticSelector:
    """Sticky choice of the static label: switch only after a sustained 2x majority."""

    ratio: float = 2.0
    frames: int = 5
    challenger: int | None = None
    streak: int = 0

    def update(self, counts: dict) -> int | None:
        """Returns the label that should become static, or ``None`` to keep label 0."""
        base = counts.get(STATIC, 0)
        others = [(c, -l) for l, c in counts.items() if l != STATIC and l >= 0]
        if not others:
            self.challenger, self.streak = None, 0
            return None
        c, neg = max(others)
        label = -neg
        if c > self.ratio * base:
            self.streak = self.streak + 1 if self.challenger == label else 1
            self.challenger = label
        else:
            self.challenger, self.streak = None, 0
        if self.streak >= self.frames:
            self.challenger, self.streak = None, 0
            return label
        return None


def map_segments(seg: MotionSegmentation, track_ids: np.ndarray, window: LabelWindow,
                 min_share: float = 0.25) -> dict:
    """Persistent label inherited by each segment from its tracks' recent history.

    Each segment scores every past label by the window weights of its tracks;
    labels are handed out greedily by score. A label is only inherited if it
    carries at least ``min_share`` of the segment's history weight. Segments
    without a usable history map to ``None`` (a new motion).
    """
    entries = list(reversed(window.entries))
    w = window.weights
    scores = []
    for m in seg.models:
        tids = track_ids[seg.labels == m.label]
        s = {}
        for age, entry in enumerate(entries[: window.n - 1], start=1):
            for t in tids:
                lab = entry.get(int(t))
                if lab is not None and lab >= 0:
                    s[lab] = s.get(lab, 0.0) + w[age]
        total = sum(s.values())
        for lab, val in s.items():
            if val >= min_share * total:
                scores.append((val, m.label, lab))
    scores.sort(key=lambda x: (-x[0], x[1], x[2]))
    out = {m.label: None for m in seg.models}
    used = set()
    for _, seg_label, lab in scores:
        if out[seg_label] is None and lab not in used:
            out[seg_label] = lab
            used.add(lab)
    return out
