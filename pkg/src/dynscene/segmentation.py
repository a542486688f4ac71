"""Multi-motion segmentation of 3D track correspondences.

Hypotheses are rigid motions fit to minimal 3-pair samples. Each data point is
described by its quantized residual preference over all hypotheses; points are
grouped by agglomerative linkage on the Jaccard distance between preference
supports, and sampling is alternated with clustering so later hypotheses are
drawn from inside the current clusters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (DegenerateGeometry, Pose, _as_arrays, estimate_rigid_alignment,
                       fit_minimal_batch, pose_distance, ransac_rigid, residuals)


class InsufficientHypotheses(Exception):
    pass


class NoModelsFound(Exception):
    pass


@dataclass(frozen=True)
class SegmentationParams:
    theta: int = 200
    lam: int = 10
    hypothesis_count: int = 200
    min_cluster_size: int = 10
    refinement_rounds: int = 2
    inlier_threshold: float = 0.1
    rng_seed: int = 0
    guided_fraction: float = 0.7
    neighbors: int = 12
    merge_angle_deg: float = 1.0
    ransac_iterations: int = 300
    exclusive_share: float = 0.5

    def __post_init__(self):
        if not 100 <= self.theta <= 800:
            raise ValueError(f"theta={self.theta} outside [100, 800]")
        if not 1 <= self.lam <= 50:
            raise ValueError(f"lambda={self.lam} outside [1, 50]")
        if self.min_cluster_size < 3:
            raise ValueError("min_cluster_size must be >= 3")
        if self.hypothesis_count < 1 or self.refinement_rounds < 1:
            raise ValueError("hypothesis_count and refinement_rounds must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 <= self.guided_fraction <= 1.0:
            raise ValueError("guided_fraction must lie in [0, 1]")
        if not 0.0 <= self.exclusive_share <= 1.0:
            raise ValueError("exclusive_share must lie in [0, 1]")


@dataclass
class PreferenceMatrix:
    values: np.ndarray  # truncated quantized residuals, int
    support: np.ndarray  # bool, True where the unclipped quantized residual <= lambda
    quantized: np.ndarray  # unclipped quantized residuals, int


@dataclass
class SegmentModel:
    label: int
    pose: Pose
    inliers: np.ndarray  # positions into the pair list


@dataclass
class MotionSegmentation:
    labels: np.ndarray  # per pair, 0 = unassigned
    models: list = field(default_factory=list)
    track_ids: np.ndarray | None = None

    def model(self, label: int) -> SegmentModel:
        for m in self.models:
            if m.label == label:
                return m
        raise KeyError(label)

    def inlier_track_ids(self, label: int) -> np.ndarray:
        idx = self.model(label).inliers
        return idx if self.track_ids is None else self.track_ids[idx]


def _distinct3(rng, sizes):
    """Three distinct indices in ``[0, size)`` per entry of ``sizes`` (each >= 3)."""
    sizes = np.asarray(sizes)
    a = rng.integers(0, sizes)
    b = rng.integers(0, sizes - 1)
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = rng.integers(0, sizes - 2)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.stack([a, b, c], axis=1)


def _draw_samples(rng, n, count, nbr, pools, n_guided):
    if n == 3:
        return np.tile(np.arange(3), (count, 1))
    out = np.empty((count, 3), dtype=np.int64)
    g = min(n_guided, count)
    if g:
        which = rng.integers(0, len(pools), g)
        sizes = np.array([len(pools[w]) for w in which])
        local = _distinct3(rng, sizes)
        out[:g] = [pools[w][row] for w, row in zip(which, local)]
    rest = count - g
    if rest:
        k = nbr.shape[1]
        if k > 3:
            anchor = rng.integers(0, n, rest)
            pick = _distinct3(rng, np.full(rest, k - 1))[:, :2]
            out[g:, 0] = anchor
            out[g:, 1:] = nbr[anchor[:, None], 1 + pick]
        else:
            out[g:] = _distinct3(rng, np.full(rest, n))
    return out


def _sample_motion_arrays(P, Q, count, guidance, seed, guided_fraction, neighbors):
    n = len(P)
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 pairs, got {n}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    k = min(n, neighbors + 1)
    _, nbr = cKDTree(P).query(P, k=k)
    nbr = np.asarray(nbr).reshape(n, k)
    pools = [np.asarray(c) for c in (guidance or []) if len(c) >= 3]
    n_guided = int(round(count * guided_fraction)) if pools else 0

    Rs, ts = [], []
    have, drawn = 0, 0
    while have < count and drawn < 3 * count:
        batch = min(count - have, 3 * count - drawn)
        idx = _draw_samples(rng, n, batch, nbr, pools, max(n_guided - have, 0))
        drawn += batch
        R, t, ok = fit_minimal_batch(P, Q, idx)
        Rs.append(R[ok])
        ts.append(t[ok])
        have += int(ok.sum())
    R = np.concatenate(Rs)[:count]
    t = np.concatenate(ts)[:count]
    if len(R) < count / 2:
        raise InsufficientHypotheses(f"only {len(R)} of {count} hypotheses are valid")
    return R, t


def sample_hypotheses(pairs, count: int, guidance=None, seed: int = 0,
                      guided_fraction: float = 0.7, neighbors: int = 12) -> list:
    """Fit ``count`` rigid hypotheses to minimal samples.

    Without ``guidance`` each sample is an anchor plus two of its nearest
    neighbours in the previous frame. ``guidance`` is a list of index arrays
    (current clusters); ``guided_fraction`` of the samples are then drawn from a
    single cluster each. Degenerate samples are redrawn, up to ``3 * count``
    draws in total.
    """
    P, Q = _as_arrays(pairs)
    R, t = _sample_motion_arrays(P, Q, count, guidance, seed, guided_fraction, neighbors)
    return [Pose.from_matrix(Ri, ti) for Ri, ti in zip(R, t)]


def compute_residuals(hypotheses, pairs) -> np.ndarray:
    """N x M matrix of ``|q_i - T_j p_i|`` in metres.

    ``hypotheses`` is a list of poses or a ``(rotations, translations)`` tuple
    of stacked arrays.
    """
    P, Q = _as_arrays(pairs)
    if isinstance(hypotheses, tuple):
        Rs, ts = hypotheses
    else:
        if len(hypotheses) == 0:
            raise ValueError("need at least one hypothesis")
        Rs = np.stack([h.rotation for h in hypotheses])
        ts = np.stack([h.trans for h in hypotheses])
    if len(Rs) == 0 or len(P) == 0:
        raise ValueError("need at least one hypothesis and one pair")
    pred = np.matmul(P, np.swapaxes(Rs, 1, 2)) + ts[:, None, :]  # M,N,3
    diff = Q[None] - pred
    return np.sqrt(np.einsum("mni,mni->nm", diff, diff))


def quantize_preferences(R: np.ndarray, theta: int, lam: int, span_tol: float = 1e-9) -> PreferenceMatrix:
    """Per-column min-max quantization followed by truncation at ``lam``.

    Columns whose residual span is at most ``span_tol`` (floating-point noise
    around a perfect fit) are degenerate: every row quantizes to 0.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or not np.all(np.isfinite(R)) or np.any(R < 0):
        raise ValueError("residual matrix must be 2-D, finite and non-negative")
    rmin = R.min(axis=0)
    span = R.max(axis=0) - rmin
    safe = np.where(span > 0, span, 1.0)
    q = np.floor((R - rmin) / safe * theta + 0.5).astype(np.int64)
    q[:, span <= span_tol] = 0
    support = q <= lam
    values = np.where(support, q, 0)
    return PreferenceMatrix(values=values, support=support, quantized=q)


def hypothesis_preferences(R: np.ndarray, theta: int, lam: int) -> PreferenceMatrix:
    """Preference of each hypothesis over the data points (transposed quantization).

    Diagnostic only; the segmentation loop clusters points, not hypotheses.
    """
    return quantize_preferences(np.asarray(R).T, theta, lam)


def _jaccard_row(S: np.ndarray, cnt: np.ndarray, i: int) -> np.ndarray:
    inter = S @ S[i]
    union = cnt + cnt[i] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 - inter / union
    return np.where(union > 0, d, 1.0)


def linkage_cluster(Q, min_cluster_size: int, return_unassigned: bool = False):
    """Agglomerative clustering of preference rows.

    A cluster's preference set is the intersection of its members' supports;
    the closest pair (Jaccard distance) is merged until every remaining pair is
    at distance 1. Ties merge the lowest indices first. Returns a list of
    sorted index arrays of size >= ``min_cluster_size``, ordered by first
    member; optionally also the unassigned indices.
    """
    support = Q.support if isinstance(Q, PreferenceMatrix) else np.asarray(Q, dtype=bool)
    n = support.shape[0]
    nonempty = np.flatnonzero(support.any(axis=1))
    unassigned = [np.setdiff1d(np.arange(n), nonempty)]
    clusters = []
    if len(nonempty):
        rows = support[nonempty]
        packed = np.packbits(rows, axis=1)
        _, first, inverse = np.unique(packed, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        groups = [[] for _ in order]
        for pos, g in enumerate(inverse):
            groups[rank[g]].append(nonempty[pos])
        S = rows[first[order]].astype(np.float32)
        members = [np.array(g) for g in groups]
        clusters = _merge(S, members)
    out = []
    for c in clusters:
        if len(c) >= min_cluster_size:
            out.append(np.sort(c))
        else:
            unassigned.append(c)
    out.sort(key=lambda c: c[0])
    if return_unassigned:
        un = np.sort(np.concatenate(unassigned)).astype(np.int64) if unassigned else np.zeros(0, np.int64)
        return out, un
    return out


def _merge(S: np.ndarray, members: list) -> list:
    K = len(members)
    if K == 1:
        return members
    cnt = S.sum(axis=1)
    inter = S @ S.T
    union = cnt[:, None] + cnt[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        D = np.where(union > 0, 1.0 - inter / union, 1.0)
    np.fill_diagonal(D, np.inf)
    active = np.ones(K, dtype=bool)
    rowarg = np.argmin(D, axis=1)
    rowmin = D[np.arange(K), rowarg]
    while True:
        i = int(np.argmin(rowmin))
        if not rowmin[i] < 1.0:
            break
        j = int(rowarg[i])
        a, b = min(i, j), max(i, j)
        members[a] = np.concatenate([members[a], members[b]])
        members[b] = None
        active[b] = False
        S[a] = S[a] * S[b]
        S[b] = 0
        cnt[a] = S[a].sum()
        cnt[b] = 0
        d = _jaccard_row(S, cnt, a)
        d[~active] = np.inf
        d[a] = np.inf
        D[a, :] = d
        D[:, a] = d
        D[b, :] = np.inf
        D[:, b] = np.inf
        rowmin[b] = np.inf
        # rows whose nearest neighbour was a or b need a fresh scan
        stale = np.flatnonzero(active & ((rowarg == a) | (rowarg == b)))
        for r in stale:
            rowarg[r] = np.argmin(D[r])
            rowmin[r] = D[r, rowarg[r]]
        better = active & ((d < rowmin) | ((d == rowmin) & (a < rowarg)))
        better[a] = False
        rowmin[better] = d[better]
        rowarg[better] = a
        rowarg[a] = np.argmin(D[a])
        rowmin[a] = D[a, rowarg[a]]
    return [m for m in members if m is not None]


def _assign(P, Q, poses, threshold):
    if not poses:
        return np.zeros(len(P), dtype=np.int64), np.full(len(P), np.inf)
    r = np.stack([residuals(T, P, Q) for T in poses], axis=1)
    best = np.argmin(r, axis=1)
    rbest = r[np.arange(len(P)), best]
    labels = np.where(rbest < threshold, best + 1, 0)
    return labels, rbest


def segment_motions(pairs, params: SegmentationParams, track_ids=None) -> MotionSegmentation:
    """Alternate sampling and clustering, then refit and merge the rigid models.

    After the final round each cluster is refit with RANSAC, near-duplicate
    models (rotation below ``merge_angle_deg`` and translation below the inlier
    threshold) are merged, and every pair is assigned to the model with the
    smallest residual if that residual is under the inlier threshold.
    """
    P, Q = _as_arrays(pairs)
    n = len(P)
    if n < 2 * params.min_cluster_size:
        raise NoModelsFound(f"{n} pairs is fewer than 2 * min_cluster_size")
    seeds = np.random.SeedSequence(params.rng_seed).generate_state(params.refinement_rounds + 2)
    clusters = None
    for r in range(params.refinement_rounds):
        hyps = _sample_motion_arrays(P, Q, params.hypothesis_count, clusters, int(seeds[r]),
                                     params.guided_fraction, params.neighbors)
        pref = quantize_preferences(compute_residuals(hyps, (P, Q)), params.theta, params.lam)
        clusters = linkage_cluster(pref, params.min_cluster_size) or None
    if not clusters:
        raise NoModelsFound("every cluster is smaller than min_cluster_size")

    thr = params.inlier_threshold
    fitted = []
    for c in clusters:
        try:
            T, inl = ransac_rigid((P[c], Q[c]), thr, params.ransac_iterations, int(seeds[-1]))
        except DegenerateGeometry:
            continue
        fitted.append((T, c[inl]))
    fitted.sort(key=lambda m: (-len(m[1]), int(m[1][0])))

    merged = []
    max_angle = math.radians(params.merge_angle_deg)
    for T, idx in fitted:
        for k, (T2, idx2) in enumerate(merged):
            ang, dist = pose_distance(T, T2)
            if ang < max_angle and dist < thr:
                union = np.union1d(idx, idx2)
                merged[k] = (estimate_rigid_alignment((P[union], Q[union])), union)
                break
        else:
            merged.append((T, idx))

    # greedy exclusive consensus: a model must explain points the larger ones do not
    merged.sort(key=lambda m: -len(m[1]))
    poses = []
    covered = np.zeros(n, dtype=bool)
    for T, _ in merged:
        inl = residuals(T, P, Q) < thr
        fresh = int((inl & ~covered).sum())
        if fresh >= params.min_cluster_size and fresh >= params.exclusive_share * inl.sum():
            poses.append(T)
            covered |= inl
    for _ in range(5):
        labels, _ = _assign(P, Q, poses, thr)
        counts = np.bincount(labels, minlength=len(poses) + 1)[1:]
        keep = counts >= params.min_cluster_size
        if keep.all():
            break
        poses = [T for T, k in zip(poses, keep) if k]
    if not poses:
        raise NoModelsFound("no model keeps min_cluster_size inliers")

    # refit on the final assignment and relabel 1..K by decreasing size
    refit = []
    for k in range(len(poses)):
        idx = np.flatnonzero(labels == k + 1)
        try:
            refit.append(estimate_rigid_alignment((P[idx], Q[idx])))
        except DegenerateGeometry:
            refit.append(poses[k])
    labels, _ = _assign(P, Q, refit, thr)
    counts = np.bincount(labels, minlength=len(refit) + 1)[1:]
    order = [k for k in sorted(range(len(refit)), key=lambda k: -counts[k]) if counts[k] >= 3]
    if not order:
        raise NoModelsFound("no model keeps min_cluster_size inliers")
    remap = np.zeros(len(refit) + 1, dtype=np.int64)
    models = []
    for new, k in enumerate(order, start=1):
        remap[k + 1] = new
        idx = np.flatnonzero(labels == k + 1)
        models.append(SegmentModel(new, refit[k], idx))
    labels = remap[labels]
    tid = None if track_ids is None else np.asarray(track_ids)
    return MotionSegmentation(labels=labels, models=models, track_ids=tid)
