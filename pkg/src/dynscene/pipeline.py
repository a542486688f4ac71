"""End-to-end pipeline, split into stages that communicate through files.

Directory layouts::

    simulate     scene.txt camera.txt sequence/frame_*.txt
                 gt/camera_trajectory.txt gt/object<L>_trajectory.txt gt/objects.txt
    segment      frame_*.txt (per-pair segment labels and segment motions)
    track        labels/frame_*.txt camera_trajectory.txt object<L>_trajectory.txt models.txt
    reconstruct  static_map.ply object<L>.ply *_trajectory.txt manifest.txt
                 masks/voted_*.pgm masks/refined_*.pgm
    evaluate     metrics CSV + <name>_summary.txt

``run_pipeline`` chains the stages with every intermediate written to disk,
so a staged run and an end-to-end run produce the same files.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as fio
from .config import PipelineConfig, SceneConfig, load_scene_spec, scene_spec_text
from .evaluation import (IoUSeries, MetricsTable, label_correspondence, mask_iou,
                         object_trajectory_error, segmentation_accuracy, surface_distance,
                         trajectory_rmse, write_summary)
from scipy.spatial import cKDTree

from .geometry import Pose, StereoCamera, triangulate_many
from .masks import (EmptyProjection, NoLabeledFeatures, compute_superpixels, expand_labels,
                    project_model_mask, read_label_mask, refine_with_projected_mask,
                    vote_superpixel_labels, write_label_mask)
from .motion import UNASSIGNED
from .recon import (ObjectModel, SceneExport, VoxelCloud, accumulate_static_map, backproject,
                    export_scene, new_object_model, stitch_object_model)
from .segmentation import MotionSegmentation, SegmentModel
from .sim import generate_sequence, render_label_grid
from .tracking import MotionTracker, StageError

log = logging.getLogger(__name__)

SEGMENTS_HEADER = "# dymseg v1"
LABELS_HEADER = "# dymlab v1"


# --------------------------------------------------------------------------- #
# simulate


def camera_to_dict(cam: StereoCamera) -> dict:
    return {"fx": repr(cam.fx), "fy": repr(cam.fy), "cx": repr(cam.cx), "cy": repr(cam.cy),
            "baseline": repr(cam.baseline), "width": cam.image_width, "height": cam.image_height}


def camera_from_dict(d: dict) -> StereoCamera:
    try:
        return StereoCamera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            float(d["baseline"]), int(d["width"]), int(d["height"]))
    except (KeyError, ValueError) as exc:
        raise fio.DataError(f"bad camera description: {exc}") from exc


def simulate(scene: SceneConfig, out_dir) -> Path:
    out = Path(out_dir)
    spec = scene.build()
    frames, _ = generate_sequence(spec, with_grids=False)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "scene.txt").write_text(scene_spec_text(scene.preset, **scene.options), encoding="utf-8")
    info = camera_to_dict(spec.camera)
    info.update(frame_count=spec.frame_count, frame_rate=repr(spec.frame_rate))
    fio.write_key_values(out / "camera.txt", info, header="# dynscene camera")
    fio.write_sequence(out / "sequence", frames)
    stamps = np.arange(spec.frame_count) / spec.frame_rate
    fio.write_trajectory(out / "gt" / "camera_trajectory.txt", stamps,
                         [f.gt_camera_pose for f in frames])
    objs = {}
    for o in spec.objects:
        fio.write_trajectory(out / "gt" / f"object{o.label}_trajectory.txt", stamps,
                             [f.gt_object_poses[o.label] for f in frames])
        objs[f"object.{o.label}"] = f"{o.shape} " + " ".join(repr(float(e)) for e in o.extent)
    fio.write_key_values(out / "gt" / "objects.txt", objs, header="# dynscene ground-truth objects")
    return out


@dataclass
class Sequence:
    camera: StereoCamera
    frames: list
    frame_rate: float
    scene: SceneConfig | None = None

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.frames)) / self.frame_rate


def load_sequence(seq_dir) -> Sequence:
    d = Path(seq_dir)
    if not (d / "camera.txt").exists():
        raise fio.DataError(f"{d}: missing camera.txt")
    info = fio.read_key_values(d / "camera.txt")
    frames = fio.read_sequence(d / "sequence")
    if not frames:
        raise fio.DataError(f"{d}: empty sequence")
    scene = load_scene_spec(d / "scene.txt") if (d / "scene.txt").exists() else None
    return Sequence(camera_from_dict(info), frames, float(info.get("frame_rate", 10.0)), scene)


# --------------------------------------------------------------------------- #
# segment


def write_segmentation(path, seg: MotionSegmentation | None, track_ids: np.ndarray) -> None:
    lines = [SEGMENTS_HEADER]
    if seg is not None:
        for m in seg.models:
            q, t = m.pose.quat, m.pose.trans
            lines.append("model %d %s" % (m.label, " ".join(repr(float(x)) for x in (*q, *t))))
            lines.append("inliers %d %s" % (m.label, " ".join(str(int(i)) for i in track_ids[m.inliers])))
        for tid, lab in zip(track_ids, seg.labels):
            lines.append(f"pair {int(tid)} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_segmentation(path, track_ids: np.ndarray) -> MotionSegmentation | None:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != SEGMENTS_HEADER:
        raise fio.ParseError(path, 1, f"expected header {SEGMENTS_HEADER!r}")
    poses, inliers, labels = {}, {}, {}
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "model":
                v = [float(x) for x in parts[2:]]
                poses[int(parts[1])] = Pose(np.array(v[:4]), np.array(v[4:7]))
            elif parts[0] == "inliers":
                inliers[int(parts[1])] = [int(x) for x in parts[2:]]
            elif parts[0] == "pair":
                labels[int(parts[1])] = int(parts[2])
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise fio.ParseError(path, no, str(exc)) from exc
    if not poses:
        return None
    pos = {int(t): i for i, t in enumerate(track_ids)}
    try:
        lab = np.array([labels[int(t)] for t in track_ids], dtype=np.int64)
        models = [SegmentModel(l, poses[l], np.array([pos[t] for t in inliers[l]], dtype=np.int64))
                  for l in sorted(poses)]
    except KeyError as exc:
        raise fio.DataError(f"{path}: segmentation does not match the sequence ({exc})") from exc
    return MotionSegmentation(lab, models, np.asarray(track_ids))


def segment_stage(seq: Sequence, cfg: PipelineConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tracker = MotionTracker(seq.camera, cfg.tracker_config())
    for obs in seq.frames:
        fp = tracker.pairs(obs)
        if fp is None:
            write_segmentation(out / fio.frame_filename(obs.frame_index), None, np.zeros(0, np.int64))
            continue
        seg = tracker.segment(fp, obs.frame_index)
        write_segmentation(out / fio.frame_filename(obs.frame_index), seg, fp.track_ids)
    return out


# --------------------------------------------------------------------------- #
# track


def write_labels(path, track_ids, labels, gt_labels) -> None:
    lines = [LABELS_HEADER] + [f"{int(t)} {int(l)} {int(g)}" for t, l, g in zip(track_ids, labels, gt_labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != LABELS_HEADER:
        raise fio.ParseError(path, 1, f"expected header {LABELS_HEADER!r}")
    try:
        rows = np.array([[int(x) for x in l.split()] for l in lines[1:] if l.strip()],
                        dtype=np.int64).reshape(-1, 3)
    except ValueError as exc:
        raise fio.ParseError(path, 0, str(exc)) from exc
    return rows[:, 0], rows[:, 1], rows[:, 2]


@dataclass
class TrackRecord:
    """What the track stage leaves on disk, read back."""

    camera_poses: list
    labels: list  # per frame: (track_ids, labels, gt_labels)
    models: dict = field(default_factory=dict)  # label -> ModelRecord


@dataclass
class ModelRecord:
    label: int
    birth_frame: int
    t_init: Pose
    frames: list
    coasting: list
    poses: list
    retired: bool = False

    def pose_at(self, frame: int) -> Pose:
        return self.poses[frame - self.birth_frame]


def track_stage(seq: Sequence, cfg: PipelineConfig, seg_dir, out_dir) -> Path:
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    tracker = MotionTracker(seq.camera, cfg.tracker_config())
    seg_dir = Path(seg_dir)
    for obs in seq.frames:
        k = obs.frame_index
        fp = tracker.pairs(obs)
        seg_file = seg_dir / fio.frame_filename(k)
        if not seg_file.exists():
            raise fio.DataError(f"missing segmentation file {seg_file}")
        if fp is None:
            tracker.results.append(_empty_result(k))
            write_labels(out / "labels" / fio.frame_filename(k), [], [], [])
            continue
        seg = read_segmentation(seg_file, fp.track_ids)
        res = tracker._advance(k, fp, seg)
        write_labels(out / "labels" / fio.frame_filename(k), res.track_ids, res.labels, res.gt_labels)
    fio.write_trajectory(out / "camera_trajectory.txt", seq.timestamps, tracker.trajectory.poses)
    info = {}
    for lab, m in sorted(tracker.models.items()):
        fio.write_trajectory(out / f"object{lab}_trajectory.txt", seq.timestamps[m.frames],
                             m.global_trajectory)
        info[f"model.{lab}.birth"] = m.birth_frame
        info[f"model.{lab}.t_init"] = " ".join(repr(float(x)) for x in m.t_init.trans)
        info[f"model.{lab}.coasting"] = " ".join("1" if c else "0" for c in m.coasting)
        info[f"model.{lab}.retired"] = int(m.retired)
    info["labels"] = " ".join(str(l) for l in sorted(tracker.models))
    fio.write_key_values(out / "models.txt", info, header="# dynscene models")
    return out


def _empty_result(k):
    from .tracking import FrameResult

    e = np.zeros(0, np.int64)
    return FrameResult(k, e, e, e)


def load_tracks(track_dir, frame_rate: float = 10.0) -> TrackRecord:
    d = Path(track_dir)
    stamps, cam = fio.read_trajectory(d / "camera_trajectory.txt")
    labels = []
    for k in range(len(cam)):
        labels.append(read_labels(d / "labels" / fio.frame_filename(k)))
    info = fio.read_key_values(d / "models.txt")
    rec = TrackRecord(cam, labels)
    for tok in info.get("labels", "").split():
        lab = int(tok)
        st, poses = fio.read_trajectory(d / f"object{lab}_trajectory.txt")
        frames = [int(round(s * frame_rate)) for s in st]
        birth = int(info[f"model.{lab}.birth"])
        t_init = Pose.from_translation([float(x) for x in info[f"model.{lab}.t_init"].split()])
        coasting = [c == "1" for c in info[f"model.{lab}.coasting"].split()]
        rec.models[lab] = ModelRecord(lab, birth, t_init, frames, coasting, poses,
                                      bool(int(info[f"model.{lab}.retired"])))
    return rec


# --------------------------------------------------------------------------- #
# reconstruct


@dataclass
class DenseFrame:
    voted: np.ndarray
    refined: np.ndarray


def vote_frame(grid, feature_px, feature_labels, cfg: PipelineConfig):
    """Superpixels of ``grid`` and their voted labels (``None`` without labeled features)."""
    sp = compute_superpixels(grid, cfg.superpixels)
    try:
        return sp, vote_superpixel_labels(sp, feature_px, feature_labels, cfg.superpixels)
    except NoLabeledFeatures:
        return sp, None


def refine_frame(grid, sp, sp_labels, models: dict, object_clouds: dict, camera_pose: Pose,
                 frame: int, cfg: PipelineConfig) -> np.ndarray:
    """Drop object superpixels that fall outside their model's projected mask."""
    masks, unmasked = {}, []
    for lab in np.unique(sp_labels):
        lab = int(lab)
        if lab <= 0:
            continue
        m = models.get(lab)
        cloud = object_clouds.get(lab)
        if m is None or frame not in m.frames or cloud is None or len(cloud) == 0:
            unmasked.append(lab)
            continue
        try:
            masks[lab] = project_model_mask(cloud.cloud.points, m.pose_at(frame), camera_pose,
                                            grid.camera, cfg.superpixels.splat_radius)
        except EmptyProjection:
            masks[lab] = None
    return refine_with_projected_mask(sp_labels, sp, masks, cfg.superpixels.overlap_threshold,
                                      keep_unmasked=tuple(unmasked))


def _grid_px(cam: StereoCamera, grid_cam: StereoCamera, px: np.ndarray) -> np.ndarray:
    s = grid_cam.fx / cam.fx
    return (px + 0.5) * s - 0.5


def reconstruct_stage(seq: Sequence, cfg: PipelineConfig, track_dir, out_dir) -> SceneExport:
    if seq.scene is None:
        raise fio.DataError("dense reconstruction needs the scene description (scene.txt)")
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rec = load_tracks(track_dir, seq.frame_rate)
    spec = seq.scene.build()
    rp = cfg.reconstruction
    static_map = VoxelCloud(rp.static_voxel)
    clouds = {lab: new_object_model(lab, rp.object_voxel) for lab in rec.models}
    far = spec.far_depth
    anchors: dict = {}  # label -> egocentric points of features with a stable label
    prev_labels: dict = {}
    for obs in seq.frames:
        k = obs.frame_index
        tids, labels, _ = rec.labels[k]
        if len(tids) == 0:
            continue
        grid = render_label_grid(spec, k)
        pos = {int(t): i for i, t in enumerate(obs.track_ids)}
        rows = [pos[int(t)] for t in tids]
        px = obs.left_px[rows]
        feat_cam, feat_ok = triangulate_many(seq.camera, px, obs.right_px[rows], cfg.tracking.row_tolerance)
        T_C = rec.camera_poses[k]
        try:
            sp, sp_labels = vote_frame(grid, _grid_px(seq.camera, grid.camera, px), labels, cfg)
        except Exception as exc:  # noqa: BLE001
            raise StageError(k, "superpixels", exc) from exc
        prev = prev_labels
        prev_labels = dict(zip(tids.tolist(), labels.tolist()))
        if sp_labels is None:
            continue
        voted = expand_labels(sp_labels, sp)
        stable = np.array([prev.get(int(t)) == int(l) for t, l in zip(tids, labels)], dtype=bool)
        for lab, m in rec.models.items():
            if k not in m.frames or m.coasting[k - m.birth_frame]:
                continue
            to_ego = m.pose_at(k).inverse().compose(T_C)
            mine = (labels == lab) & feat_ok
            current = to_ego.apply(feat_cam[mine])
            history = anchors.setdefault(lab, [])
            gate_pts = np.concatenate(history + [current])
            # only features whose label persisted keep vouching in later frames
            history.append(to_ego.apply(feat_cam[mine & stable]))
            sel = (voted == lab) & (grid.depth < far)
            if not sel.any() or len(gate_pts) == 0:
                continue
            pts, (vv, uu) = backproject(grid.camera, grid.depth, sel)
            # a voted superpixel is stitched only if it touches the object's feature-level points
            d = cKDTree(gate_pts).query(to_ego.apply(pts), k=1, distance_upper_bound=rp.feature_gate)[0]
            cell = sp.assignment[vv, uu]
            touching = np.zeros(sp.count, dtype=bool)
            touching[cell[d <= rp.feature_gate]] = True
            near = touching[cell]
            stitch_object_model(clouds[lab], pts[near], grid.color[vv[near], uu[near]], to_ego, k)
        try:
            refined = refine_frame(grid, sp, sp_labels, rec.models, clouds, T_C, k, cfg)
        except Exception as exc:  # noqa: BLE001
            raise StageError(k, "refine", exc) from exc
        write_label_mask(out / "masks" / f"voted_{k:06d}.pgm", voted)
        write_label_mask(out / "masks" / f"refined_{k:06d}.pgm", refined)
        depth_ok = grid.depth < min(far, rp.map_max_depth)
        pts, (vv, uu) = backproject(grid.camera, grid.depth, (refined == 0) & depth_ok)
        accumulate_static_map(static_map, pts, grid.color[vv, uu], T_C, k)
    export = SceneExport(
        frame_count=len(seq.frames), timestamps=seq.timestamps, static_map=static_map,
        camera_poses=rec.camera_poses, object_models=clouds,
        object_frames={l: m.frames for l, m in rec.models.items()},
        object_poses={l: m.poses for l, m in rec.models.items()})
    export_scene(export, out)
    return export


# --------------------------------------------------------------------------- #
# evaluate


def _load_gt(gt_dir):
    d = Path(gt_dir) / "gt"
    _, cam = fio.read_trajectory(d / "camera_trajectory.txt")
    shapes = {}
    for key, val in fio.read_key_values(d / "objects.txt").items():
        lab = int(key.split(".")[1])
        parts = val.split()
        shapes[lab] = (parts[0], tuple(float(x) for x in parts[1:]))
    objs = {lab: fio.read_trajectory(d / f"object{lab}_trajectory.txt")[1] for lab in shapes}
    return cam, objs, shapes


def evaluate_stage(track_dir, gt_dir, out_file, recon_dir=None, frame_rate: float = 10.0,
                   overlap_stride: int = 5) -> dict:
    rec = load_tracks(track_dir, frame_rate)
    gt_cam, gt_objs, shapes = _load_gt(gt_dir)
    table = MetricsTable()
    summary = {}
    cam_err = trajectory_rmse(rec.camera_poses, gt_cam)
    for k, (p, r) in enumerate(zip(cam_err.position_errors, cam_err.rotation_errors)):
        table.add(k, "camera_position_error", 0, p)
        table.add(k, "camera_rotation_error_deg", 0, r)
    summary["camera_position_rmse_m"] = repr(cam_err.position_rmse)
    summary["camera_rotation_rmse_deg"] = repr(cam_err.rotation_rmse)

    est_all = np.concatenate([l for _, l, _ in rec.labels if len(l)] or [np.zeros(0, np.int64)])
    gt_all = np.concatenate([g for _, _, g in rec.labels if len(g)] or [np.zeros(0, np.int64)])
    if len(est_all):
        rate = segmentation_accuracy(est_all, gt_all)
        summary["misclassification_rate"] = repr(rate)
        for k, (_, l, g) in enumerate(rec.labels):
            if len(l):
                table.add(k, "misclassification_rate", -1, segmentation_accuracy(l, g))
    mapping = label_correspondence(est_all, gt_all) if len(est_all) else {}
    summary["label_map"] = " ".join(f"{e}:{g}" for e, g in sorted(mapping.items()))

    for lab, m in sorted(rec.models.items()):
        g = mapping.get(lab)
        if g is None or g not in gt_objs:
            continue
        err = object_trajectory_error(m, dict(enumerate(gt_objs[g])))
        frames = [f for f, c in zip(m.frames, m.coasting) if not c]
        for f, p, r in zip(frames, err.position_errors, err.rotation_errors):
            table.add(f, "object_position_error", lab, p)
            table.add(f, "object_rotation_error_deg", lab, r)
        summary[f"object.{lab}.gt_label"] = g
        summary[f"object.{lab}.position_rmse_m"] = repr(err.position_rmse)
        summary[f"object.{lab}.rotation_rmse_deg"] = repr(err.rotation_rmse)
        summary[f"object.{lab}.evaluated_frames"] = len(frames)
    summary["object_rmse_note"] = "object errors cover visible (non-coasting) frames only"

    if recon_dir is not None:
        _evaluate_dense(Path(recon_dir), Path(gt_dir), rec, mapping, gt_objs, shapes, table,
                        summary, overlap_stride)
    out = Path(out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    write_summary(out.with_name(out.stem + "_summary.txt"), summary)
    return summary


def recon_overlap(points_ego: np.ndarray, model: ModelRecord, gt_poses: list, shape, tol: float,
                  stride: int = 5) -> float:
    """Share of (point, frame) placements within ``tol`` of the true object surface."""
    if len(points_ego) == 0:
        return 0.0
    hits = total = 0
    for i, f in enumerate(model.frames):
        if model.coasting[i] or (f - model.birth_frame) % stride:
            continue
        g = model.poses[i].apply(points_ego)
        local = gt_poses[f].inverse().apply(g)
        d = surface_distance(local, *shape)
        hits += int(np.count_nonzero(d <= tol))
        total += len(d)
    return hits / total if total else 0.0


def _evaluate_dense(recon_dir, gt_dir, rec, mapping, gt_objs, shapes, table, summary, stride):
    seq = load_sequence(gt_dir)
    spec = seq.scene.build() if seq.scene is not None else None
    if spec is None:
        return
    before, after = IoUSeries(), IoUSeries()
    inv = {g: e for e, g in mapping.items()}
    for k in range(len(seq.frames)):
        fv = recon_dir / "masks" / f"voted_{k:06d}.pgm"
        if not fv.exists():
            continue
        voted = read_label_mask(fv)
        refined = read_label_mask(recon_dir / "masks" / f"refined_{k:06d}.pgm")
        gt = render_label_grid(spec, k)
        vb, va = {}, {}
        for g in gt_objs:
            e = inv.get(g)
            est_b = voted == e if e is not None else np.zeros_like(voted, bool)
            est_a = refined == e if e is not None else np.zeros_like(refined, bool)
            vb[g] = mask_iou(est_b, gt.labels == g, True)
            va[g] = mask_iou(est_a, gt.labels == g, True)
            table.add(k, "iou_voted", g, vb[g])
            table.add(k, "iou_refined", g, va[g])
        before.add(k, vb)
        after.add(k, va)
    for g, v in before.means().items():
        summary[f"iou.{g}.voted_mean"] = repr(v)
        summary[f"iou.{g}.refined_mean"] = repr(after.means()[g])
    export = fio.read_key_values(recon_dir / "manifest.txt")
    from .recon import read_ply

    voxel = float(export["voxel.object"])
    for lab, m in sorted(rec.models.items()):
        g = mapping.get(lab)
        key = f"model.{lab}"
        if g is None or key not in export:
            continue
        pts, _ = read_ply(recon_dir / export[key])
        ov = recon_overlap(pts, m, gt_objs[g], shapes[g], 2 * voxel, stride)
        summary[f"object.{lab}.model_points"] = len(pts)
        summary[f"object.{lab}.overlap_2voxel"] = repr(ov)


# --------------------------------------------------------------------------- #
# end to end


def run_pipeline(cfg: PipelineConfig, scene: SceneConfig, out_dir):
    """simulate -> segment -> track -> reconstruct -> evaluate under ``out_dir``.

    Returns ``(export or None, summary)``.
    """
    out = Path(out_dir)
    sim_dir = simulate(scene, out / "sim")
    seq = load_sequence(sim_dir)
    segment_stage(seq, cfg, out / "segments")
    track_stage(seq, cfg, out / "segments", out / "tracks")
    export = None
    recon_dir = None
    if cfg.pipeline.dense:
        export = reconstruct_stage(seq, cfg, out / "tracks", out / "recon")
        recon_dir = out / "recon"
    summary = evaluate_stage(out / "tracks", sim_dir, out / "metrics.csv", recon_dir, seq.frame_rate)
    return export, summary
