"""Voxel-deduplicated point clouds: the static map and per-object models."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, StereoCamera


class IoFailure(OSError):
    pass


class VoxelCloud:
    """Points binned on a voxel lattice; each occupied voxel keeps its first point.

    Colours of later arrivals in an occupied voxel are folded into a running
    mean. ``frames`` records the frame that created each voxel.
    """

    def __init__(self, voxel_size: float, frame_tag: str = "global"):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.frame_tag = frame_tag
        self._index: dict = {}
        self._points: list = []
        self._color_sum: list = []
        self._count: list = []
        self._frames: list = []

    def __len__(self):
        return len(self._index)

    def _keys(self, pts: np.ndarray) -> np.ndarray:
        cells = np.floor(pts / self.voxel_size).astype(np.int64)
        # 21 bits per axis, offset so negative cells pack cleanly
        cells += 1 << 20
        if np.any(cells < 0) or np.any(cells >= 1 << 21):
            raise ValueError("points fall outside the supported voxel range")
        return (cells[:, 0] << 42) | (cells[:, 1] << 21) | cells[:, 2]

    def insert(self, points: np.ndarray, colors: np.ndarray | None = None, frame: int = -1) -> int:
        """Add points; returns how many new voxels were created."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        cols = (np.full((len(pts), 3), np.nan) if colors is None
                else np.asarray(colors, dtype=float).reshape(-1, 3))
        keys = self._keys(pts)
        uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        sums = np.stack([np.bincount(inv, cols[:, c], minlength=len(uniq)) for c in range(3)], axis=1)
        counts = np.bincount(inv, minlength=len(uniq))
        idx = self._index
        added = 0
        for j, key in enumerate(uniq.tolist()):
            slot = idx.get(key)
            if slot is None:
                idx[key] = len(self._points)
                self._points.append(pts[first[j]])
                self._color_sum.append(sums[j].copy())
                self._count.append(int(counts[j]))
                self._frames.append(frame)
                added += 1
            else:
                self._color_sum[slot] += sums[j]
                self._count[slot] += int(counts[j])
        return added

    @property
    def points(self) -> np.ndarray:
        return np.array(self._points).reshape(-1, 3)

    @property
    def colors(self) -> np.ndarray:
        if not self._points:
            return np.zeros((0, 3))
        return np.array(self._color_sum) / np.array(self._count, dtype=float)[:, None]

    @property
    def frames(self) -> np.ndarray:
        return np.array(self._frames, dtype=np.int64)

    def transformed(self, T: Pose) -> np.ndarray:
        return T.apply(self.points) if len(self) else np.zeros((0, 3))


def backproject(cam: StereoCamera, depth: np.ndarray, mask: np.ndarray, max_depth: float = np.inf):
    """Camera-frame points of the masked pixels with depth below ``max_depth``."""
    vv, uu = np.nonzero(mask & (depth < max_depth) & (depth > 0))
    z = depth[vv, uu]
    pts = np.column_stack([(uu - cam.cx) * z / cam.fx, (vv - cam.cy) * z / cam.fy, z])
    return pts, (vv, uu)


def accumulate_static_map(static_map: VoxelCloud, points_cam: np.ndarray, colors: np.ndarray,
                          camera_pose: Pose, frame: int = -1) -> int:
    return static_map.insert(camera_pose.apply(points_cam), colors, frame)


@dataclass
class ObjectModel:
    """Object cloud held in the object's egocentric frame (fixed at its birth)."""

    label: int
    cloud: VoxelCloud
    frames_added: list = field(default_factory=list)

    def __len__(self):
        return len(self.cloud)

    @property
    def gravity_center(self) -> np.ndarray:
        """Mean of the retained model points (egocentric frame)."""
        pts = self.cloud.points
        return pts.mean(axis=0) if len(pts) else np.zeros(3)


def new_object_model(label: int, voxel_size: float = 0.02) -> ObjectModel:
    return ObjectModel(label, VoxelCloud(voxel_size, frame_tag=f"object{label}"))


def stitch_object_model(model: ObjectModel, points_cam: np.ndarray, colors: np.ndarray,
                        to_egocentric: Pose, frame: int = -1) -> int:
    """Merge a frame's object points, mapped into the egocentric frame by ``to_egocentric``.

    ``to_egocentric`` combines the birth transform and the cumulative ego-motion
    increments, so successive frames land in one shared frame.
    """
    added = model.cloud.insert(to_egocentric.apply(points_cam), colors, frame)
    if len(points_cam):
        model.frames_added.append(frame)
    return added


# --------------------------------------------------------------------------- #
# export


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cols = None
    if colors is not None:
        c = np.asarray(colors, dtype=float).reshape(-1, 3)
        cols = np.clip(np.rint(np.nan_to_num(c, nan=0.5) * 255), 0, 255).astype(int)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if cols is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    lines = []
    for i, p in enumerate(pts):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if cols is not None:
            row += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
        lines.append(row)
    try:
        Path(path).write_text("\n".join(header + lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ply(path):
    """Minimal ASCII PLY reader matching :func:`write_ply`; returns (points, colors or None)."""
    try:
        text = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    end = text.index("end_header")
    n = next(int(l.split()[2]) for l in text[:end] if l.startswith("element vertex"))
    has_color = any("red" in l for l in text[:end])
    data = np.array([l.split() for l in text[end + 1:end + 1 + n]], dtype=float).reshape(n, -1)
    pts = data[:, :3]
    cols = data[:, 3:6] / 255.0 if has_color else None
    return pts, cols


@dataclass
class SceneExport:
    """Everything needed to rebuild the 4D scene: map, models, and per-frame poses."""

    frame_count: int
    timestamps: np.ndarray
    static_map: VoxelCloud
    camera_poses: list
    object_models: dict = field(default_factory=dict)  # label -> ObjectModel
    object_frames: dict = field(default_factory=dict)  # label -> list of frame indices
    object_poses: dict = field(default_factory=dict)  # label -> list of Pose (egocentric -> global)

    def __post_init__(self):
        if len(self.camera_poses) != self.frame_count:
            raise ValueError("camera trajectory must cover every frame")
        for lab in self.object_models:
            if lab not in self.object_poses or len(self.object_poses[lab]) != len(self.object_frames[lab]):
                raise ValueError(f"object {lab} lacks a trajectory")
        for lab in self.object_poses:
            if lab not in self.object_models:
                raise ValueError(f"object {lab} lacks a model")


def export_scene(export: SceneExport, out_dir) -> dict:
    """Write the map, egocentric object models, trajectories and a key-value manifest."""
    from .io import write_key_values, write_trajectory

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"frame_count": export.frame_count,
                    "labels": " ".join(str(l) for l in sorted(export.object_models)),
                    "static_map": "static_map.ply",
                    "voxel.static": repr(export.static_map.voxel_size),
                    "trajectory.camera": "camera_trajectory.txt"}
        write_ply(out / "static_map.ply", export.static_map.points, export.static_map.colors)
        write_trajectory(out / "camera_trajectory.txt", export.timestamps, export.camera_poses)
        for lab in sorted(export.object_models):
            model = export.object_models[lab]
            write_ply(out / f"object{lab}.ply", model.cloud.points, model.cloud.colors)
            stamps = export.timestamps[np.asarray(export.object_frames[lab], dtype=int)]
            write_trajectory(out / f"object{lab}_trajectory.txt", stamps, export.object_poses[lab])
            manifest[f"model.{lab}"] = f"object{lab}.ply"
            manifest["voxel.object"] = repr(model.cloud.voxel_size)
            manifest[f"trajectory.{lab}"] = f"object{lab}_trajectory.txt"
        write_key_values(out / "manifest.txt", manifest)
    except IoFailure:
        raise
    except OSError as exc:
        raise IoFailure(f"cannot write {exc.filename or out}: {exc}") from exc
    return manifest


def read_export(out_dir, frame_rate: float | None = None) -> dict:
    """Read back what :func:`export_scene` wrote (points, colors, trajectories)."""
    from .io import read_key_values, read_trajectory

    out = Path(out_dir)
    man = read_key_values(out / "manifest.txt")
    labels = [int(x) for x in man["labels"].split()]
    res = {"frame_count": int(man["frame_count"]), "labels": labels,
           "static_map": read_ply(out / man["static_map"]),
           "camera": read_trajectory(out / man["trajectory.camera"]),
           "models": {}, "trajectories": {}}
    for lab in labels:
        res["models"][lab] = read_ply(out / man[f"model.{lab}"])
        res["trajectories"][lab] = read_trajectory(out / man[f"trajectory.{lab}"])
    return res
