"""Synthetic dynamic stereo scenes with exact ground truth.

The static background is the inside of an axis-aligned box (a room or a
corridor) with feature points scattered on its walls. Moving objects are boxes
or y-axis cylinders with feature points on their surface. Everything is ray
cast analytically, so occlusion and per-pixel depth are exact.

Frames are indexed from 0. Ground-truth poses are reported in the global frame,
which is the left camera frame at frame 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, StereoCamera, project_stereo  # noqa: F401  (re-exported)

STATIC_LABEL = 0
_EPS = 1e-7


class EmptyScene(Exception):
    pass


@dataclass
class ObjectSpec:
    label: int
    point_count: int
    extent: tuple  # box: full sizes (x, y, z); cylinder: (diameter, height, diameter)
    trajectory: list  # world-from-object Pose per frame
    shape: str = "box"
    color: tuple = (0.9, 0.9, 0.9)

    def __post_init__(self):
        if self.label <= 0:
            raise ValueError("object labels must be positive (0 is the background)")
        if self.shape not in ("box", "cylinder"):
            raise ValueError(f"unknown shape {self.shape!r}")
        self.extent = tuple(float(e) for e in self.extent)


@dataclass
class SceneSpec:
    camera: StereoCamera
    camera_trajectory: list  # world-from-camera Pose per frame
    objects: list = field(default_factory=list)
    static_point_count: int = 2000
    static_bounds: tuple = ((-2.0, -1.5, -2.0), (2.0, 1.5, 10.0))
    pixel_noise_sigma: float = 0.0
    rng_seed: int = 0
    frame_count: int | None = None
    max_depth: float = math.inf
    grid_scale: float = 1.0
    far_depth: float = 100.0
    depth_quantum: float = 1e-3
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.frame_count is None:
            self.frame_count = len(self.camera_trajectory)
        if self.frame_count < 2:
            raise ValueError("frame_count must be at least 2")
        if len(self.camera_trajectory) != self.frame_count:
            raise ValueError("camera trajectory length differs from frame_count")
        for obj in self.objects:
            if len(obj.trajectory) != self.frame_count:
                raise ValueError(f"object {obj.label} trajectory length differs from frame_count")
        if len({o.label for o in self.objects}) != len(self.objects):
            raise ValueError("object labels must be unique")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel_noise_sigma must be non-negative")
        lo, hi = (np.asarray(b, dtype=float) for b in self.static_bounds)
        if np.any(hi <= lo):
            raise ValueError("static_bounds must have hi > lo on every axis")
        self.static_bounds = (tuple(lo), tuple(hi))


@dataclass
class FrameObservation:
    frame_index: int
    track_ids: np.ndarray  # (N,) int
    left_px: np.ndarray  # (N, 2)
    right_px: np.ndarray  # (N, 2)
    gt_labels: np.ndarray  # (N,) int
    gt_camera_pose: Pose | None = None
    gt_object_poses: dict = field(default_factory=dict)  # label -> Pose (global frame)
    gt_points: np.ndarray | None = None  # (N, 3) global coordinates, noiseless

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64).reshape(-1)
        self.left_px = np.asarray(self.left_px, dtype=float).reshape(-1, 2)
        self.right_px = np.asarray(self.right_px, dtype=float).reshape(-1, 2)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        n = len(self.track_ids)
        if not (len(self.left_px) == len(self.right_px) == len(self.gt_labels) == n):
            raise ValueError("track arrays have inconsistent lengths")
        if len(np.unique(self.track_ids)) != n:
            raise ValueError("track ids must be unique within a frame")

    def __len__(self):
        return len(self.track_ids)


@dataclass
class LabelGrid:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) metres, > 0
    labels: np.ndarray  # (H, W) int, 0 = background
    camera: StereoCamera | None = None
    depth_quantum: float = 0.0

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


# --------------------------------------------------------------------------- #
# surface sampling and ray casting


def _sample_box_surface(rng, n, lo, hi):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2],
                      size[0] * size[2], size[0] * size[2],
                      size[0] * size[1], size[0] * size[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * size
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def _sample_cylinder_surface(rng, n, radius, half_height):
    side_area = 2 * math.pi * radius * 2 * half_height
    cap_area = math.pi * radius ** 2
    p_side = side_area / (side_area + 2 * cap_area)
    on_side = rng.uniform(size=n) < p_side
    ang = rng.uniform(0, 2 * math.pi, n)
    pts = np.empty((n, 3))
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    pts[:, 0] = r * np.cos(ang)
    pts[:, 2] = r * np.sin(ang)
    cap_y = np.where(rng.uniform(size=n) < 0.5, -half_height, half_height)
    pts[:, 1] = np.where(on_side, rng.uniform(-half_height, half_height, n), cap_y)
    return pts


def _ray_box_entry(o, d, half):
    """Entry distance along rays into a centred box; inf where missed or inside."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = (tn <= tf) & (tn > 0)
    return np.where(hit, tn, np.inf)


def _ray_cylinder_entry(o, d, radius, half_height):
    o = np.broadcast_to(o, d.shape)
    best = np.full(d.shape[0], np.inf)
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2])
    c = o[:, 0] ** 2 + o[:, 2] ** 2 - radius ** 2
    disc = b * b - 4 * a * c
    ok = (a > 0) & (disc >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_side = (-b - sq) / (2 * a)
    y = o[:, 1] + t_side * d[:, 1]
    side_hit = ok & (t_side > 0) & (np.abs(y) <= half_height)
    best = np.where(side_hit, t_side, best)
    for cap in (-half_height, half_height):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (cap - o[:, 1]) / d[:, 1]
        x = o[:, 0] + tc * d[:, 0]
        z = o[:, 2] + tc * d[:, 2]
        cap_hit = (d[:, 1] != 0) & (tc > 0) & (x * x + z * z <= radius ** 2)
        # entry through the cap only when the origin is outside the slab on that side
        cap_hit &= np.sign(o[:, 1] - cap) == np.sign(cap)
        best = np.where(cap_hit & (tc < best), tc, best)
    return best


def _room_exit(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmax = np.where(d == 0, np.inf, np.maximum(t1, t2))
    t = tmax.min(axis=-1)
    return np.where(t > 0, t, np.inf)


def _background_color(p, lo, hi):
    """Procedural wall texture: smooth stripes with a per-face tint."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    dist = np.stack([np.abs(p - lo), np.abs(p - hi)], axis=-1)  # (N, 3, 2)
    face = np.argmin(dist.reshape(len(p), 6), axis=1)
    tints = np.array([
        [0.75, 0.55, 0.45], [0.45, 0.6, 0.75], [0.6, 0.6, 0.55],
        [0.7, 0.7, 0.7], [0.5, 0.7, 0.5], [0.7, 0.5, 0.65],
    ])
    base = tints[face]
    wave = 0.5 + 0.5 * np.sin(p[:, 0] * 4.1 + p[:, 2] * 2.3) * np.cos(p[:, 1] * 3.7 + p[:, 2] * 1.1)
    return np.clip(base * (0.7 + 0.3 * wave)[:, None], 0.0, 1.0)


class _SceneGeometry:
    """Cached per-scene surface samples and primitive parameters."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.rng_seed)
        lo, hi = (np.asarray(b) for b in spec.static_bounds)
        self.lo, self.hi = lo, hi
        self.static_points = _sample_box_surface(rng, spec.static_point_count, lo, hi)
        self.object_points = []
        for obj in spec.objects:
            ext = np.asarray(obj.extent)
            if obj.shape == "box":
                pts = _sample_box_surface(rng, obj.point_count, -ext / 2, ext / 2)
            else:
                pts = _sample_cylinder_surface(rng, obj.point_count, ext[0] / 2, ext[1] / 2)
            self.object_points.append(pts)
        self.noise_rng = np.random.default_rng([spec.rng_seed, 1])

    def cast(self, frame: int, origin_world: np.ndarray, dirs_world: np.ndarray):
        """First hit along ``origin + t * dir``; returns ``(t, label, hit_point)``."""
        t = _room_exit(origin_world, dirs_world, self.lo, self.hi)
        labels = np.zeros(len(dirs_world), dtype=np.int64)
        for obj in self.spec.objects:
            W = obj.trajectory[frame]
            Rt = W.rotation.T
            o = Rt @ (origin_world - W.trans)
            d = dirs_world @ Rt.T
            ext = np.asarray(obj.extent)
            if obj.shape == "box":
                to = _ray_box_entry(o, d, ext / 2)
            else:
                to = _ray_cylinder_entry(o, d, ext[0] / 2, ext[1] / 2)
            closer = to < t
            t = np.where(closer, to, t)
            labels = np.where(closer, obj.label, labels)
        return t, labels

    def object_color(self, obj: ObjectSpec, p_obj: np.ndarray) -> np.ndarray:
        ext = np.asarray(obj.extent) / 2
        if obj.shape == "box":
            face = np.argmax(np.abs(p_obj) / ext, axis=1)
        else:
            face = np.where(np.abs(p_obj[:, 1]) >= ext[1] - 1e-9, 1, 0)
        shade = np.array([0.85, 1.0, 0.7])[face]
        return np.clip(np.asarray(obj.color)[None, :] * shade[:, None], 0.0, 1.0)


_geometry_cache: dict = {}


def _geometry(spec: SceneSpec) -> _SceneGeometry:
    key = id(spec)
    g = _geometry_cache.get(key)
    if g is None or g.spec is not spec:
        g = _SceneGeometry(spec)
        _geometry_cache.clear()
        _geometry_cache[key] = g
    return g


# --------------------------------------------------------------------------- #
# sequence generation


def _points_world(geo: _SceneGeometry, frame: int):
    pts = [geo.static_points]
    labels = [np.zeros(len(geo.static_points), dtype=np.int64)]
    for obj, op in zip(geo.spec.objects, geo.object_points):
        pts.append(obj.trajectory[frame].apply(op))
        labels.append(np.full(len(op), obj.label, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(labels)


def _visible(geo: _SceneGeometry, frame: int, pw: np.ndarray):
    """Ideal left/right pixels and visibility of world points at ``frame``."""
    spec = geo.spec
    cam = spec.camera
    C = spec.camera_trajectory[frame]
    pc = C.inverse().apply(pw)
    z = pc[:, 2]
    front = (z > 1e-6) & (z <= spec.max_depth)
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    ur = u - cam.fx * cam.baseline / zs
    ok = front & cam.in_image(u, v) & cam.in_image(ur, v)
    idx = np.flatnonzero(ok)
    if len(idx):
        for origin in (C.trans, C.apply(np.array([cam.baseline, 0.0, 0.0]))):
            d = pw[idx] - origin
            t, _ = geo.cast(frame, origin, d)
            seen = t >= 1.0 - 1e-6
            ok[idx[~seen]] = False
            idx = idx[seen]
            if not len(idx):
                break
    return ok, np.column_stack([u, v]), np.column_stack([ur, v]), pc


def generate_sequence(spec: SceneSpec, with_grids: bool = True):
    """Simulate every frame; returns ``(frames, grids)`` (``grids`` empty if disabled)."""
    geo = _SceneGeometry(spec)
    _geometry_cache.clear()
    _geometry_cache[id(spec)] = geo
    C0inv = spec.camera_trajectory[0].inverse()
    n_points = len(geo.static_points) + sum(len(p) for p in geo.object_points)
    current_id = np.full(n_points, -1, dtype=np.int64)
    next_id = 0
    frames, grids = [], []
    sigma = spec.pixel_noise_sigma
    any_visible = False
    for k in range(spec.frame_count):
        pw, labels = _points_world(geo, k)
        ok, left, right, _ = _visible(geo, k, pw)
        # dead tracks stay dead; re-detections get a fresh id
        current_id[~ok] = -1
        born = ok & (current_id < 0)
        nb = int(born.sum())
        current_id[born] = np.arange(next_id, next_id + nb)
        next_id += nb
        idx = np.flatnonzero(ok)
        any_visible |= len(idx) > 0
        L = left[idx]
        Rr = right[idx]
        if sigma > 0 and len(idx):
            L = L + geo.noise_rng.normal(0.0, sigma, L.shape)
            Rr = Rr + geo.noise_rng.normal(0.0, sigma, Rr.shape)
        gcam = C0inv.compose(spec.camera_trajectory[k])
        gobj = {o.label: C0inv.compose(o.trajectory[k]) for o in spec.objects}
        frames.append(FrameObservation(
            frame_index=k,
            track_ids=current_id[idx],
            left_px=L,
            right_px=Rr,
            gt_labels=labels[idx],
            gt_camera_pose=gcam,
            gt_object_poses=gobj,
            gt_points=C0inv.apply(pw[idx]) if len(idx) else np.zeros((0, 3)),
        ))
        if with_grids:
            grids.append(render_label_grid(spec, k))
    if not any_visible:
        raise EmptyScene("no scene point is visible in any frame")
    return frames, grids


def render_label_grid(spec: SceneSpec, frame: int) -> LabelGrid:
    if not 0 <= frame < spec.frame_count:
        raise IndexError(f"frame {frame} outside [0, {spec.frame_count})")
    geo = _geometry(spec)
    cam = spec.camera.scaled(spec.grid_scale) if spec.grid_scale != 1.0 else spec.camera
    H, W = cam.image_height, cam.image_width
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    dirs_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    dirs_cam = dirs_cam.reshape(-1, 3)
    C = spec.camera_trajectory[frame]
    dirs_w = dirs_cam @ C.rotation.T
    t, labels = geo.cast(frame, C.trans, dirs_w)
    hit = np.isfinite(t)
    depth = np.where(hit, t, spec.far_depth)
    labels = np.where(hit, labels, 0)
    pts = C.trans + dirs_w * np.where(hit, t, 0.0)[:, None]
    color = np.zeros((len(t), 3))
    bg = hit & (labels == 0)
    color[bg] = _background_color(pts[bg], geo.lo, geo.hi)
    for obj in spec.objects:
        m = labels == obj.label
        if m.any():
            color[m] = geo.object_color(obj, obj.trajectory[frame].inverse().apply(pts[m]))
    if spec.depth_quantum > 0:
        depth = np.maximum(np.round(depth / spec.depth_quantum) * spec.depth_quantum, spec.depth_quantum)
    return LabelGrid(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        labels=labels.reshape(H, W).astype(np.int64),
        camera=cam,
        depth_quantum=spec.depth_quantum,
    )
