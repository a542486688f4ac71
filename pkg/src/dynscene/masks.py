"""Dense motion labels from sparse tracks: depth-aware superpixels plus mask refinement.

Pixel features are ``(r, g, b, x, y, depth)``. Two features are compared with

    D  = |color_a - color_b|^2 / N_u^2 + |xy_a - xy_b|^2 / N_s^2
    D' = D + (1/depth_a - 1/depth_b)^2 / N_d^2
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Pose, StereoCamera
from .sim import LabelGrid


class NonPositiveDepth(ValueError):
    pass


class EmptyProjection(Exception):
    """No model point lands in the image; ``mask`` is the (all-false) result."""

    def __init__(self, message: str, mask: np.ndarray | None = None):
        super().__init__(message)
        self.mask = mask


class NoLabeledFeatures(ValueError):
    pass


@dataclass(frozen=True)
class SuperpixelParams:
    target_count: int = 300
    N_u: float = 0.2
    N_s: float | None = None  # None: lattice spacing sqrt(pixels / target_count)
    N_d: float = 0.5
    iterations: int = 5
    knn_k: int = 5
    overlap_threshold: float = 0.9
    splat_radius: float = 3.0  # pixels at 1 m depth, scaled by 1/z

    def __post_init__(self):
        if self.target_count < 1 or self.iterations < 0 or self.knn_k < 1:
            raise ValueError("target_count and knn_k must be >= 1, iterations >= 0")
        if self.N_u <= 0 or self.N_d <= 0 or (self.N_s is not None and self.N_s <= 0):
            raise ValueError("normalizers must be positive")
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must lie in (0, 1]")
        if self.splat_radius <= 0:
            raise ValueError("splat_radius must be positive")

    def spacing(self, pixels: int) -> float:
        return float(np.sqrt(pixels / self.target_count))

    def spatial_norm(self, pixels: int) -> float:
        return self.N_s if self.N_s is not None else self.spacing(pixels)


def superpixel_distance(a, b, params: SuperpixelParams, use_depth: bool = True,
                        spatial_norm: float | None = None):
    """Distance between feature vectors ``(r, g, b, x, y, depth)`` (broadcasts)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ns = spatial_norm if spatial_norm is not None else params.N_s
    if ns is None:
        raise ValueError("spatial normalizer unknown: set N_s or pass spatial_norm")
    dc = a[..., :3] - b[..., :3]
    dp = a[..., 3:5] - b[..., 3:5]
    D = (dc * dc).sum(-1) / params.N_u ** 2 + (dp * dp).sum(-1) / ns ** 2
    if not use_depth:
        return D
    da, db = a[..., 5], b[..., 5]
    if np.any(da <= 0) or np.any(db <= 0):
        raise NonPositiveDepth("depth must be positive")
    return D + (1.0 / da - 1.0 / db) ** 2 / params.N_d ** 2


def _scaled_features(f: np.ndarray, params: SuperpixelParams, ns: float) -> np.ndarray:
    """Embedding in which squared Euclidean distance equals D'."""
    return np.concatenate([f[..., :3] / params.N_u, f[..., 3:5] / ns,
                           (1.0 / f[..., 5:6]) / params.N_d], axis=-1)


@dataclass
class SuperpixelGrid:
    assignment: np.ndarray  # (H, W) superpixel index
    centers: np.ndarray  # (S, 6) mean feature of members
    sizes: np.ndarray  # (S,) pixel counts

    @property
    def count(self) -> int:
        return len(self.centers)


def pixel_features(grid: LabelGrid) -> np.ndarray:
    H, W = grid.height, grid.width
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    if np.any(grid.depth <= 0):
        raise NonPositiveDepth("depth grid must be positive everywhere")
    return np.concatenate([grid.color, uu[..., None], vv[..., None], grid.depth[..., None]], axis=-1)


def _centers(feat_flat, assign_flat, count):
    sizes = np.bincount(assign_flat, minlength=count).astype(float)
    sums = np.stack([np.bincount(assign_flat, feat_flat[:, c], minlength=count)
                     for c in range(feat_flat.shape[1])], axis=1)
    return sums / np.maximum(sizes, 1)[:, None], sizes


def _enforce_connectivity(assign, emb_flat, centers_emb):
    """Keep each superpixel's largest piece; merge other pieces into a touching neighbour."""
    H, W = assign.shape
    n = H * W
    idx = np.arange(n).reshape(H, W)
    pairs = []
    for a, b in ((idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])):
        pairs.append((a.ravel(), b.ravel()))
    ea = np.concatenate([p[0] for p in pairs])
    eb = np.concatenate([p[1] for p in pairs])
    flat = assign.ravel().copy()
    same = flat[ea] == flat[eb]
    g = coo_matrix((np.ones(int(same.sum())), (ea[same], eb[same])), shape=(n, n))
    ncomp, comp = connected_components(g, directed=False)
    comp_size = np.bincount(comp, minlength=ncomp)
    comp_label = np.empty(ncomp, dtype=np.int64)
    comp_label[comp] = flat
    # the largest component per superpixel (lowest component id on ties) is kept
    order = np.lexsort((np.arange(ncomp), -comp_size, comp_label))
    first = np.ones(ncomp, dtype=bool)
    first[1:] = comp_label[order][1:] != comp_label[order][:-1]
    kept = np.zeros(ncomp, dtype=bool)
    kept[order[first]] = True
    if kept.all():
        return assign
    comp_emb = np.stack([np.bincount(comp, emb_flat[:, c], minlength=ncomp)
                         for c in range(emb_flat.shape[1])], axis=1) / comp_size[:, None]
    cross = comp[ea] != comp[eb]
    ca = np.concatenate([comp[ea][cross], comp[eb][cross]])
    cb = np.concatenate([comp[eb][cross], comp[ea][cross]])
    owner = np.arange(ncomp)  # component -> kept component it was merged into
    while not kept.all():
        root_b = owner[cb]
        ok = ~kept[ca] & kept[root_b]
        if not ok.any():
            break
        oa, ob = ca[ok], root_b[ok]
        d = ((comp_emb[oa] - centers_emb[comp_label[ob]]) ** 2).sum(axis=1)
        sel = np.lexsort((ob, d, oa))
        oa, ob = oa[sel], ob[sel]
        firsts = np.ones(len(oa), dtype=bool)
        firsts[1:] = oa[1:] != oa[:-1]
        oa, ob = oa[firsts], ob[firsts]
        owner[oa] = ob
        comp_label[oa] = comp_label[ob]
        kept[oa] = True
    return comp_label[comp].reshape(H, W)


def compute_superpixels(grid: LabelGrid, params: SuperpixelParams) -> SuperpixelGrid:
    """SLIC-style clustering with the depth-augmented distance, then a connectivity pass."""
    H, W = grid.height, grid.width
    if params.target_count > H * W:
        raise ValueError("target_count exceeds the pixel count")
    feat = pixel_features(grid)
    step = params.spacing(H * W)
    ns = params.spatial_norm(H * W)
    emb = _scaled_features(feat, params, ns)

    ys = np.arange(step / 2, H, step)
    xs = np.arange(step / 2, W, step)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    cy0 = np.clip(np.floor(gy).astype(int), 0, H - 1)
    cx0 = np.clip(np.floor(gx).astype(int), 0, W - 1)
    ny, nx = gy.shape
    centers = feat[cy0, cx0].reshape(-1, 6)
    centers[:, 3] = gx.ravel()
    centers[:, 4] = gy.ravel()

    # candidate centers per pixel: the 3x3 block of lattice cells around it
    vv, uu = np.mgrid[0:H, 0:W]
    cell_y = np.clip((vv / step).astype(int), 0, ny - 1)
    cell_x = np.clip((uu / step).astype(int), 0, nx - 1)
    cand = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy = np.clip(cell_y + dy, 0, ny - 1)
            xx = np.clip(cell_x + dx, 0, nx - 1)
            cand.append(yy * nx + xx)
    assign = cand[4]
    uu = uu.astype(float)
    vv = vv.astype(float)
    for _ in range(params.iterations):
        cemb = _scaled_features(centers, params, ns)
        best = np.full((H, W), np.inf)
        for c in cand:
            diff = emb - cemb[c]
            d = np.einsum("hwc,hwc->hw", diff, diff)
            # restrict to the +-step search window around each center
            d[(np.abs(centers[c, 3] - uu) > step) | (np.abs(centers[c, 4] - vv) > step)] += 1e12
            better = d < best
            best[better] = d[better]
            assign = np.where(better, c, assign)
        new_c, sizes = _centers(feat.reshape(-1, 6), assign.ravel(), ny * nx)
        centers = np.where(sizes[:, None] > 0, new_c, centers)

    cemb = _scaled_features(centers, params, ns)
    assign = _enforce_connectivity(assign, emb.reshape(-1, emb.shape[-1]), cemb)
    used, assign_flat = np.unique(assign.ravel(), return_inverse=True)
    assign = assign_flat.reshape(H, W)
    centers, sizes = _centers(feat.reshape(-1, 6), assign.ravel(), len(used))
    return SuperpixelGrid(assignment=assign, centers=centers, sizes=sizes.astype(np.int64))


def _plurality(labels: np.ndarray) -> int:
    """Most frequent label; any tie resolves to the static label 0."""
    vals, counts = np.unique(labels, return_counts=True)
    top = counts.max()
    winners = vals[counts == top]
    return int(winners[0]) if len(winners) == 1 else 0


def vote_superpixel_labels(sp: SuperpixelGrid, feature_px: np.ndarray, feature_labels: np.ndarray,
                           params: SuperpixelParams) -> np.ndarray:
    """Per-superpixel label from the labeled features inside it, else from its nearest blocks.

    ``feature_px`` are (u, v) pixel coordinates in the grid; negative labels are
    ignored. Empty superpixels repeatedly take the plurality label of the
    labeled ones among their ``knn_k`` nearest superpixels (distance D' between
    center features) until every superpixel is labeled.
    """
    H, W = sp.assignment.shape
    px = np.asarray(feature_px, dtype=float).reshape(-1, 2)
    lab = np.asarray(feature_labels, dtype=np.int64).reshape(-1)
    u = np.rint(px[:, 0]).astype(int)
    v = np.rint(px[:, 1]).astype(int)
    ok = (lab >= 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    if not ok.any():
        raise NoLabeledFeatures("no labeled feature inside the grid")
    cell = sp.assignment[v[ok], u[ok]]
    lab = lab[ok]
    S = sp.count
    out = np.full(S, -1, dtype=np.int64)
    order = np.argsort(cell, kind="stable")
    cell, lab = cell[order], lab[order]
    bounds = np.flatnonzero(np.diff(cell)) + 1
    for c, group in zip(cell[np.r_[0, bounds]], np.split(lab, bounds)):
        out[c] = _plurality(group)
    if (out < 0).any():
        ns = params.spatial_norm(H * W)
        emb = _scaled_features(sp.centers, params, ns)
        tree = cKDTree(emb)
        k = min(params.knn_k + 1, S)
        _, nbr = tree.query(emb, k=k)
        nbr = np.asarray(nbr).reshape(S, k)[:, 1:]
        while (out < 0).any():
            todo = np.flatnonzero(out < 0)
            new = {}
            for s in todo:
                labs = out[nbr[s]]
                labs = labs[labs >= 0]
                if len(labs):
                    new[s] = _plurality(labs)
            if not new:
                # isolated unlabeled group: fall back to the nearest labeled superpixel
                done = np.flatnonzero(out >= 0)
                _, j = cKDTree(emb[done]).query(emb[todo], k=1)
                out[todo] = out[done[np.asarray(j).reshape(-1)]]
                break
            for s, l in new.items():
                out[s] = l
    return out


def project_model_mask(points_model: np.ndarray, model_global_pose: Pose, camera_pose: Pose,
                       cam: StereoCamera, base_radius: float = 3.0) -> np.ndarray:
    """Silhouette of a model cloud: depth-scaled disk splats followed by one closing pass.

    ``points_model`` are egocentric model points; ``model_global_pose`` maps
    them to the global frame and ``camera_pose`` maps camera to global.
    """
    pts = np.asarray(points_model, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("model cloud is empty")
    H, W = cam.image_height, cam.image_width
    pc = camera_pose.inverse().apply(model_global_pose.apply(pts))
    z = pc[:, 2]
    front = z > 1e-6
    zf = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zf + cam.cx
    v = cam.fy * pc[:, 1] / zf + cam.cy
    r = base_radius / zf
    ok = front & (u > -r - 0.5) & (u < W - 0.5 + r) & (v > -r - 0.5) & (v < H - 0.5 + r)
    if not ok.any():
        raise EmptyProjection("no model point projects into the image", np.zeros((H, W), dtype=bool))
    u, v, r = u[ok], v[ok], r[ok]
    ui, vi = np.rint(u).astype(int), np.rint(v).astype(int)
    mask = np.zeros((H, W), dtype=bool)
    R = int(np.ceil(r.max()))
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            sel = dx * dx + dy * dy <= np.maximum(r * r, 0.25)
            x = ui[sel] + dx
            y = vi[sel] + dy
            inside = (x >= 0) & (x < W) & (y >= 0) & (y < H)
            mask[y[inside], x[inside]] = True
    if not mask.any():
        raise EmptyProjection("no model point projects into the image", mask)
    st = np.ones((3, 3), dtype=bool)
    return ndimage.binary_erosion(ndimage.binary_dilation(mask, st), st, border_value=1)


def refine_with_projected_mask(sp_labels: np.ndarray, sp: SuperpixelGrid, masks: dict,
                               threshold: float = 0.9, keep_unmasked: tuple = ()) -> np.ndarray:
    """Per-pixel labels after dropping object superpixels that leave their model's mask.

    An object superpixel keeps its label only if at least ``threshold`` of its
    pixels fall inside ``masks[label]``. Labels listed in ``keep_unmasked``
    have no model to project yet and are passed through unchanged; any other
    label without a usable mask is reset to 0.
    """
    labels = np.asarray(sp_labels, dtype=np.int64).copy()
    assign = sp.assignment
    sizes = np.bincount(assign.ravel(), minlength=sp.count)
    for lab in np.unique(labels):
        if lab <= 0 or lab in keep_unmasked:
            continue
        mask = masks.get(int(lab))
        members = labels == lab
        if mask is None or not np.any(mask):
            labels[members] = 0
            continue
        inside = np.bincount(assign[mask], minlength=sp.count)
        drop = members & (inside < threshold * sizes)
        labels[drop] = 0
    return labels[assign]


def expand_labels(sp_labels: np.ndarray, sp: SuperpixelGrid) -> np.ndarray:
    return np.asarray(sp_labels, dtype=np.int64)[sp.assignment]


def write_label_mask(path, mask: np.ndarray) -> None:
    """Binary PGM with one label id per pixel (8-bit when ids fit, else 16-bit)."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.min(initial=0) < 0:
        raise ValueError("label mask must be 2-D and non-negative")
    maxval = 255 if m.max(initial=0) < 256 else 65535
    dt = np.uint8 if maxval == 255 else np.dtype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(m.astype(dt).tobytes())


def read_label_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dt = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(data[pos:], dtype=dt, count=w * h)
    return arr.reshape(h, w).astype(np.int64)
