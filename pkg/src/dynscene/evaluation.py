"""Ground-truth metrics: trajectory RMSE, mask IoU, track misclassification."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Pose


class LengthMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class NoOverlap(ValueError):
    pass


@dataclass
class TrajectoryError:
    position_rmse: float
    rotation_rmse: float  # degrees
    position_errors: list = field(default_factory=list)
    rotation_errors: list = field(default_factory=list)


def _rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if len(x) else 0.0


def trajectory_rmse(estimated, ground_truth) -> TrajectoryError:
    """Per-frame translation distance and relative rotation angle; no alignment."""
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(ground_truth)} ground-truth poses")
    pos, rot = [], []
    for e, g in zip(estimated, ground_truth):
        pos.append(float(np.linalg.norm(e.trans - g.trans)))
        rot.append(float(np.degrees(e.compose(g.inverse()).angle())))
    return TrajectoryError(_rms(pos), _rms(rot), pos, rot)


def object_centroid_poses(global_poses, t_init: Pose) -> list:
    """Pose of the birth-time gravity-center frame, for each estimated object pose.

    At birth ``T_M = t_init^-1``, so ``T_M * t_init`` is the object's rigid
    displacement since birth and ``T_M * t_init * t_init`` starts out as a pure
    translation to the birth centroid.
    """
    return [T.compose(t_init).compose(t_init) for T in global_poses]


def gt_centroid_poses(gt_poses, birth_pose: Pose, t_init: Pose) -> list:
    """Ground-truth counterpart: object motion since birth applied to the centroid frame."""
    inv = birth_pose.inverse()
    return [G.compose(inv).compose(t_init) for G in gt_poses]


def object_trajectory_error(model, gt_poses_by_frame: dict) -> TrajectoryError:
    """Error of a tracked model against one ground-truth object, over non-coasting frames."""
    frames = [f for f, c in zip(model.frames, model.coasting) if not c]
    est = [model.pose_at(f) for f in frames]
    birth = gt_poses_by_frame[model.birth_frame]
    gt = [gt_poses_by_frame[f] for f in frames]
    return trajectory_rmse(object_centroid_poses(est, model.t_init),
                           gt_centroid_poses(gt, birth, model.t_init))


def surface_distance(points_local: np.ndarray, shape: str, extent) -> np.ndarray:
    """Unsigned distance from object-frame points to a centred box or y-axis cylinder."""
    p = np.asarray(points_local, dtype=float).reshape(-1, 3)
    ext = np.asarray(extent, dtype=float) / 2
    if shape == "box":
        q = np.abs(p) - ext
    elif shape == "cylinder":
        q = np.column_stack([np.hypot(p[:, 0], p[:, 2]) - ext[0], np.abs(p[:, 1]) - ext[1]])
    else:
        raise ValueError(f"unknown shape {shape!r}")
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = -np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _as_mask(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x))


def mask_iou(estimated, ground_truth, label: int) -> float:
    """Intersection over union of one label; 1 when neither mask contains it."""
    a = _as_mask(estimated) == label
    b = _as_mask(ground_truth) == label
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def label_correspondence(estimated, ground_truth) -> dict:
    """One-to-one estimated-to-gt label map maximizing agreement (negative labels ignored)."""
    est = np.asarray(estimated, dtype=np.int64).ravel()
    gt = np.asarray(ground_truth, dtype=np.int64).ravel()
    if est.shape != gt.shape:
        raise LengthMismatch("label arrays differ in length")
    ok = est >= 0
    e_vals = np.unique(est[ok])
    g_vals = np.unique(gt)
    if len(e_vals) == 0 or len(g_vals) == 0:
        return {}
    ei = np.searchsorted(e_vals, est[ok])
    gi = np.searchsorted(g_vals, gt[ok])
    C = np.zeros((len(e_vals), len(g_vals)), dtype=np.int64)
    np.add.at(C, (ei, gi), 1)
    rows, cols = linear_sum_assignment(-C)
    return {int(e_vals[r]): int(g_vals[c]) for r, c in zip(rows, cols)}


def segmentation_accuracy(labels, gt) -> float:
    """Misclassification rate after optimal one-to-one label matching.

    Accepts aligned arrays or dicts keyed by track id (evaluated on shared ids).
    Unassigned tracks (negative labels) always count as misclassified.
    """
    if isinstance(labels, dict) or isinstance(gt, dict):
        keys = sorted(set(labels) & set(gt))
        est = np.array([labels[k] for k in keys], dtype=np.int64)
        ref = np.array([gt[k] for k in keys], dtype=np.int64)
    else:
        est = np.asarray(labels, dtype=np.int64).ravel()
        ref = np.asarray(gt, dtype=np.int64).ravel()
        if est.shape != ref.shape:
            raise LengthMismatch("label arrays differ in length")
    if len(est) == 0:
        raise NoOverlap("no common tracks to evaluate")
    mapping = label_correspondence(est, ref)
    mapped = np.array([mapping.get(int(l), None) if l >= 0 else None for l in est], dtype=object)
    correct = sum(1 for m, g in zip(mapped, ref) if m is not None and m == g)
    return 1.0 - correct / len(est)


@dataclass
class IoUSeries:
    frames: list = field(default_factory=list)
    values: dict = field(default_factory=dict)  # gt label -> list of IoU per frame

    def add(self, frame: int, per_label: dict) -> None:
        self.frames.append(frame)
        for lab, v in per_label.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError("IoU outside [0, 1]")
            self.values.setdefault(lab, []).append(float(v))

    def means(self) -> dict:
        return {lab: float(np.mean(v)) for lab, v in self.values.items()}


class MetricsTable:
    """Rows of (frame, metric, label, value) with a CSV writer."""

    def __init__(self):
        self.rows: list = []

    def add(self, frame, metric: str, label, value: float) -> None:
        self.rows.append((frame, metric, label, float(value)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "metric", "label", "value"])
            for frame, metric, label, value in self.rows:
                w.writerow([frame, metric, label, repr(value)])

    @staticmethod
    def read_csv(path) -> list:
        with open(path, newline="", encoding="utf-8") as fh:
            r = csv.reader(fh)
            next(r)
            return [(f, m, l, float(v)) for f, m, l, v in r]


def write_summary(path, summary: dict) -> None:
    from .io import write_key_values

    write_key_values(Path(path), summary, header="# dynscene metrics summary")
