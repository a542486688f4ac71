"""SE(3) poses, stereo geometry, closed-form rigid alignment and RANSAC.

Quaternions are stored scalar-last ``(x, y, z, w)``, the same order used by the
trajectory files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation


class GeometryError(Exception):
    """Base class for numerical failures in this module."""


class DegenerateGeometry(GeometryError):
    pass


class NonPositiveDisparity(GeometryError):
    pass


class EpipolarViolation(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class OutOfImage(GeometryError):
    pass


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    # canonical hemisphere keeps equal rotations bit-comparable
    if q[3] < 0 or (q[3] == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _normalize_quat(self.quat)
        t = np.asarray(self.trans, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(trans=np.asarray(t, dtype=float))

    @staticmethod
    def from_matrix(R: np.ndarray, t=None) -> "Pose":
        R = np.asarray(R, dtype=float)
        if R.shape == (4, 4):
            t = R[:3, 3] if t is None else t
            R = R[:3, :3]
        q = Rotation.from_matrix(R).as_quat()
        return Pose(q, np.zeros(3) if t is None else t)

    @staticmethod
    def from_rotvec(rotvec, t=None) -> "Pose":
        q = Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat()
        return Pose(q, np.zeros(3) if t is None else t)

    @staticmethod
    def from_axis_angle(axis, angle: float, t=None) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = math.sin(angle / 2.0)
        q = np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(angle / 2.0)])
        return Pose(q, np.zeros(3) if t is None else t)

    @cached_property
    def rotation(self) -> np.ndarray:
        x, y, z, w = self.quat
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        R.flags.writeable = False
        return R

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.trans
        return M

    def apply(self, p) -> np.ndarray:
        """Transform one point (shape 3) or a stack of points (shape N x 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.trans

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = _qmul(self.quat, other.quat)
        t = self.rotation @ other.trans + self.trans
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        qi = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        t = -(self.rotation.T @ self.trans)
        return Pose(qi, t)

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        w = min(1.0, abs(float(self.quat[3])))
        v = float(np.linalg.norm(self.quat[:3]))
        return 2.0 * math.atan2(v, w)

    def rotvec(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_rotvec()

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0.0))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.trans)
        return f"Pose(quat=[{q}], trans=[{t}])"


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def transform_point(T: Pose, p) -> np.ndarray:
    return T.apply(p)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """Rotation angle (rad) and translation distance (m) between two poses."""
    d = a.inverse().compose(b)
    return d.angle(), float(np.linalg.norm(a.trans - b.trans))


@dataclass(frozen=True)
class StereoCamera:
    """Rectified pinhole stereo pair; the right camera sits ``baseline`` along +x."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy and baseline must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "StereoCamera":
        """Camera for an image resampled by ``factor`` (pixel-center convention)."""
        return StereoCamera(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            baseline=self.baseline,
            image_width=int(round(self.image_width * factor)),
            image_height=int(round(self.image_height * factor)),
        )

    def in_image(self, u, v):
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u <= self.image_width - 1) & (v >= 0) & (v <= self.image_height - 1)


@dataclass(frozen=True)
class Correspondence3D:
    track_id: int
    p_prev: np.ndarray
    p_curr: np.ndarray

    def __post_init__(self):
        if self.p_prev[2] <= 0 or self.p_curr[2] <= 0:
            raise ValueError("correspondence points need positive depth")


def stack_pairs(pairs: Sequence[Correspondence3D]) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    P = np.array([c.p_prev for c in pairs], dtype=float)
    Q = np.array([c.p_curr for c in pairs], dtype=float)
    return P, Q


def _as_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return pairs
    return stack_pairs(pairs)


def triangulate(cam: StereoCamera, left_px, right_px, row_tolerance: float = 1.0) -> np.ndarray:
    ul, vl = float(left_px[0]), float(left_px[1])
    ur, vr = float(right_px[0]), float(right_px[1])
    d = ul - ur
    if not d > 0:
        raise NonPositiveDisparity(f"disparity {d} <= 0")
    if abs(vl - vr) >= row_tolerance:
        raise EpipolarViolation(f"row mismatch {abs(vl - vr):.3f} px")
    z = cam.fx * cam.baseline / d
    return np.array([(ul - cam.cx) * z / cam.fx, (vl - cam.cy) * z / cam.fy, z])


def triangulate_many(cam: StereoCamera, left: np.ndarray, right: np.ndarray,
                     row_tolerance: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`triangulate`; returns ``(points, valid_mask)``."""
    left = np.asarray(left, dtype=float).reshape(-1, 2)
    right = np.asarray(right, dtype=float).reshape(-1, 2)
    d = left[:, 0] - right[:, 0]
    valid = (d > 0) & (np.abs(left[:, 1] - right[:, 1]) < row_tolerance)
    z = np.where(valid, cam.fx * cam.baseline / np.where(valid, d, 1.0), np.nan)
    pts = np.column_stack([
        (left[:, 0] - cam.cx) * z / cam.fx,
        (left[:, 1] - cam.cy) * z / cam.fy,
        z,
    ])
    return pts, valid


def project_stereo(cam: StereoCamera, camera_pose: Pose, p_world) -> tuple[np.ndarray, np.ndarray]:
    """Project a world point into both views; ``camera_pose`` maps camera to world."""
    pc = camera_pose.inverse().apply(p_world)
    if pc[2] <= 0:
        raise BehindCamera(f"depth {pc[2]} <= 0")
    u = cam.fx * pc[0] / pc[2] + cam.cx
    v = cam.fy * pc[1] / pc[2] + cam.cy
    ur = u - cam.fx * cam.baseline / pc[2]
    if not (cam.in_image(u, v) and cam.in_image(ur, v)):
        raise OutOfImage(f"projection ({u:.1f}, {v:.1f}) / ({ur:.1f}, {v:.1f}) outside image")
    return np.array([u, v]), np.array([ur, v])


def estimate_rigid_alignment(pairs, weights=None) -> Pose:
    """Weighted least-squares ``T`` minimising ``sum w_i |q_i - T p_i|^2``.

    ``pairs`` is a sequence of :class:`Correspondence3D` or a ``(P, Q)`` tuple of
    N x 3 arrays. Raises :class:`DegenerateGeometry` for fewer than three pairs or
    a collinear configuration.
    """
    P, Q = _as_arrays(pairs)
    n = len(P)
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 pairs, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("weights must be finite, non-negative, one per pair")
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateGeometry("all weights are zero")
    mp = w @ P / wsum
    mq = w @ Q / wsum
    Pc = P - mp
    Qc = Q - mq
    sw = np.sqrt(w)[:, None]
    sv = np.linalg.svd(Pc * sw, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometry("points are collinear or coincident")
    H = (Pc * w[:, None]).T @ Qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mq - R @ mp
    return Pose.from_matrix(R, t)


def fit_minimal_batch(P: np.ndarray, Q: np.ndarray, idx: np.ndarray):
    """Unweighted alignment of many small samples at once.

    ``idx`` is S x k (k >= 3) indices into ``P``/``Q``. Returns rotations
    (S, 3, 3), translations (S, 3) and a validity mask that is False for
    collinear or coincident samples.
    """
    A = P[idx]
    B = Q[idx]
    ma = A.mean(axis=1, keepdims=True)
    mb = B.mean(axis=1, keepdims=True)
    Ac = A - ma
    Bc = B - mb
    sv = np.linalg.svd(Ac, compute_uv=False)
    valid = (sv[:, 0] > 0) & (sv[:, 1] > 1e-9 * np.maximum(sv[:, 0], 1.0))
    H = np.einsum("ski,skj->sij", Ac, Bc)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = mb[:, 0] - np.einsum("sij,sj->si", R, ma[:, 0])
    return R, t, valid


def residuals(T: Pose, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.linalg.norm(Q - T.apply(P), axis=1)


def _ransac_iterations(inlier_ratio: float, confidence: float, sample_size: int = 3) -> float:
    if inlier_ratio <= 0:
        return math.inf
    if inlier_ratio >= 1:
        return 0
    denom = math.log(1.0 - inlier_ratio ** sample_size)
    if denom == 0:
        return math.inf
    return math.log(1.0 - confidence) / denom


def ransac_rigid(pairs, inlier_threshold: float, max_iterations: int = 500, seed: int = 0,
                 confidence: float = 0.999, weights=None, max_refits: int = 10):
    """RANSAC over minimal 3-pair samples, refit on the consensus set.

    Returns ``(pose, inlier_indices)`` where indices are sorted positions in
    ``pairs``. Optional per-pair ``weights`` are used only in the refit.
    """
    if inlier_threshold <= 0:
        raise ValueError("inlier_threshold must be positive")
    P, Q = _as_arrays(pairs)
    n = len(P)
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 pairs, got {n}")
    w = None if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)

    best_mask = None
    best_key = (-1, math.inf)
    needed = float(max_iterations)
    it = 0
    while it < min(max_iterations, needed):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            T = estimate_rigid_alignment((P[idx], Q[idx]))
        except DegenerateGeometry:
            continue
        r = residuals(T, P, Q)
        mask = r < inlier_threshold
        count = int(mask.sum())
        key = (count, float(r[mask].sum()))
        if count > best_key[0] or (count == best_key[0] and key[1] < best_key[1]):
            best_key = key
            best_mask = mask
            needed = _ransac_iterations(count / n, confidence)
    if best_mask is None or best_key[0] < 3:
        raise DegenerateGeometry("no sample produced 3 or more inliers")

    mask = best_mask
    T = None
    for _ in range(max_refits):
        try:
            T = estimate_rigid_alignment((P[mask], Q[mask]), None if w is None else w[mask])
        except DegenerateGeometry:
            if T is None:
                raise
            break
        new_mask = residuals(T, P, Q) < inlier_threshold
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return T, np.flatnonzero(mask)


def random_pose(rng: np.random.Generator, max_angle: float = math.pi, max_trans: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose.from_axis_angle(axis, rng.uniform(0, max_angle), rng.uniform(-max_trans, max_trans, 3))


def centroid(points: Iterable) -> np.ndarray:
    pts = np.asarray(list(points) if not isinstance(points, np.ndarray) else points, dtype=float)
    return pts.reshape(-1, 3).mean(axis=0)


def _skew_stack(v: np.ndarray) -> np.ndarray:
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def _stereo_terms(cam: StereoCamera, X: np.ndarray, meas: np.ndarray):
    """Residuals (N, 4) and Jacobians w.r.t. a left-perturbation (N, 4, 6)."""
    x, y, z = X.T
    iz = 1.0 / z
    pred = np.column_stack([
        cam.fx * x * iz + cam.cx,
        cam.fy * y * iz + cam.cy,
        cam.fx * (x - cam.baseline) * iz + cam.cx,
        cam.fy * y * iz + cam.cy,
    ])
    J = np.zeros((len(X), 4, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * x * iz ** 2
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * y * iz ** 2
    J[:, 2, 0] = cam.fx * iz
    J[:, 2, 2] = -cam.fx * (x - cam.baseline) * iz ** 2
    J[:, 3] = J[:, 1]
    dX = np.concatenate([np.broadcast_to(np.eye(3), (len(X), 3, 3)), -_skew_stack(X)], axis=2)
    return pred - meas, J @ dX


def refine_stereo_pose(cam: StereoCamera, T: Pose, P: np.ndarray, Q: np.ndarray,
                       pix_prev: np.ndarray, pix_curr: np.ndarray,
                       iterations: int = 10, huber: float = 2.0) -> Pose:
    """Gauss-Newton polish of a frame-to-frame motion on stereo reprojection error.

    ``T`` maps previous-frame points ``P`` onto current-frame points ``Q``.
    ``pix_prev`` / ``pix_curr`` are (N, 4) rows ``ul vl ur vr``. Both directions
    are used: ``T P`` against the current pixels and ``T^-1 Q`` against the
    previous ones. Residuals are Huber-weighted (pixels).
    """
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)
    if len(P) < 3:
        return T
    for _ in range(iterations):
        Ti = T.inverse()
        X1 = T.apply(P)
        X2 = Ti.apply(Q)
        if np.any(X1[:, 2] <= 1e-6) or np.any(X2[:, 2] <= 1e-6):
            break
        r1, J1 = _stereo_terms(cam, X1, pix_curr)
        r2, J2 = _stereo_terms(cam, X2, pix_prev)
        # perturbing T on the left by xi perturbs T^-1 by -Ad(T^-1) xi on the left
        Ad = np.zeros((6, 6))
        R = Ti.rotation
        Ad[:3, :3] = R
        Ad[3:, 3:] = R
        tx = np.array([[0, -Ti.trans[2], Ti.trans[1]], [Ti.trans[2], 0, -Ti.trans[0]],
                       [-Ti.trans[1], Ti.trans[0], 0]])
        Ad[:3, 3:] = tx @ R
        J2 = -J2 @ Ad
        r = np.concatenate([r1, r2])
        J = np.concatenate([J1, J2])
        a = np.abs(r)
        w = np.where(a < huber, 1.0, huber / np.maximum(a, 1e-300))
        A = np.einsum("nki,nk,nkj->ij", J, w, J)
        g = np.einsum("nki,nk,nk->i", J, w, r)
        try:
            xi = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            break
        T = Pose.from_rotvec(xi[3:], xi[:3]).compose(T)
        if np.linalg.norm(xi) < 1e-12:
            break
    return T
