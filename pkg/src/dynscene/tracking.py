"""Frame-by-frame multi-motion tracker: segment, associate, estimate."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import StereoCamera, triangulate_many
from .motion import (STATIC, UNASSIGNED, CameraTrajectory, LabelPairs, LabelWindow,
                     StaticSelector, StereoTerms, associate_labels, identify_camera_model,
                     map_segments, update_camera, update_object_models)
from .segmentation import SegmentationParams, segment_motions
from .sim import FrameObservation


SEGMENT = object()  # sentinel: run the segmentation inside step()


class StageError(Exception):
    """A module failure tagged with the frame and pipeline stage it occurred in."""

    def __init__(self, frame: int, stage: str, cause: Exception):
        super().__init__(f"frame {frame}, stage {stage}: {type(cause).__name__}: {cause}")
        self.frame = frame
        self.stage = stage
        self.cause = cause


@dataclass
class TrackerConfig:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    window: int = 4
    ransac_threshold: float = 0.1
    ransac_iterations: int = 300
    coast_limit: int = 10
    birth_frames: int = 3
    refine: bool = True
    refine_iterations: int = 10
    huber: float = 2.0
    row_tolerance: float = 1.0
    resume_radius: float = 1.0
    static_ratio: float = 2.0
    static_frames: int = 5
    min_share: float = 0.25

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.ransac_threshold <= 0:
            raise ValueError("ransac_threshold must be positive")
        if self.coast_limit < 1 or self.birth_frames < 1:
            raise ValueError("coast_limit and birth_frames must be >= 1")
        if self.row_tolerance <= 0:
            raise ValueError("row_tolerance must be positive")


@dataclass
class FramePairs:
    """Tracks seen in two consecutive frames, triangulated in each camera."""

    track_ids: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    pix_prev: np.ndarray
    pix_curr: np.ndarray
    gt_labels: np.ndarray

    def __len__(self):
        return len(self.track_ids)

    def subset(self, mask) -> "FramePairs":
        return FramePairs(self.track_ids[mask], self.P[mask], self.Q[mask], self.pix_prev[mask],
                          self.pix_curr[mask], self.gt_labels[mask])


def make_pairs(cam: StereoCamera, prev: FrameObservation, curr: FrameObservation,
               row_tolerance: float = 1.0) -> FramePairs:
    _, ia, ib = np.intersect1d(prev.track_ids, curr.track_ids, assume_unique=True,
                               return_indices=True)
    P, va = triangulate_many(cam, prev.left_px[ia], prev.right_px[ia], row_tolerance)
    Q, vb = triangulate_many(cam, curr.left_px[ib], curr.right_px[ib], row_tolerance)
    ok = va & vb
    ia, ib = ia[ok], ib[ok]
    return FramePairs(
        track_ids=curr.track_ids[ib],
        P=P[ok],
        Q=Q[ok],
        pix_prev=np.hstack([prev.left_px[ia], prev.right_px[ia]]),
        pix_curr=np.hstack([curr.left_px[ib], curr.right_px[ib]]),
        gt_labels=curr.gt_labels[ib],
    )


@dataclass
class FrameResult:
    frame: int
    track_ids: np.ndarray
    labels: np.ndarray  # final persistent label per track (-1 unlabeled)
    gt_labels: np.ndarray
    segment_count: int = 0
    camera_lost: bool = False


class MotionTracker:
    def __init__(self, camera: StereoCamera, config: TrackerConfig | None = None):
        self.camera = camera
        self.config = config or TrackerConfig()
        self.trajectory = CameraTrajectory()
        self.models: dict = {}
        self.window = LabelWindow(self.config.window)
        self.selector = StaticSelector(self.config.static_ratio, self.config.static_frames)
        self.next_label = 1
        self.streak: dict = {}
        self.results: list = []
        self.retired_labels: set = set()
        self._prev: FrameObservation | None = None
        self._has_history = False

    # -- helpers ----------------------------------------------------------- #

    def _stereo(self, fp: FramePairs, mask=None) -> StereoTerms | None:
        if not self.config.refine:
            return None
        sel = slice(None) if mask is None else mask
        return StereoTerms(self.camera, fp.pix_prev[sel], fp.pix_curr[sel],
                           self.config.refine_iterations, self.config.huber)

    def _new_label(self) -> int:
        lab = self.next_label
        self.next_label += 1
        return lab

    def _resume_or_new(self, frame: int, Q: np.ndarray, taken: set) -> int:
        """Label of a live model predicted near the new segment, else a fresh label."""
        T_C = self.trajectory.poses[frame]
        g = T_C.apply(Q).mean(axis=0)
        best, best_d = None, self.config.resume_radius
        for lab, m in self.models.items():
            if m.retired or lab in taken:
                continue
            c = m.displacement(-1).apply(m.gravity_center)
            d = float(np.linalg.norm(c - g))
            if d < best_d:
                best, best_d = lab, d
        return best if best is not None else self._new_label()

    # -- main step --------------------------------------------------------- #

    def segment(self, fp: FramePairs, frame: int):
        """Motion segmentation of one frame's pairs (``None`` when too few pairs)."""
        seg_cfg = self.config.segmentation
        if len(fp) < 2 * seg_cfg.min_cluster_size:
            return None
        params = replace(seg_cfg, rng_seed=int(np.random.SeedSequence([seg_cfg.rng_seed, frame])
                                                .generate_state(1)[0]))
        try:
            return segment_motions((fp.P, fp.Q), params, track_ids=fp.track_ids)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise StageError(frame, "segment", exc) from exc

    def pairs(self, obs: FrameObservation) -> FramePairs | None:
        """Register ``obs`` and return its pairs with the previous frame (``None`` at frame 0)."""
        k = obs.frame_index
        if self._prev is None:
            if k != 0:
                raise ValueError("the first frame must have index 0")
            self._prev = obs
            return None
        if k != self._prev.frame_index + 1:
            raise ValueError(f"frames must be consecutive (got {k} after {self._prev.frame_index})")
        fp = make_pairs(self.camera, self._prev, obs, self.config.row_tolerance)
        self._prev = obs
        return fp

    def step(self, obs: FrameObservation, segmentation=SEGMENT) -> FrameResult:
        """Process one frame; pass ``segmentation`` to reuse a stored segmentation."""
        k = obs.frame_index
        fp = self.pairs(obs)
        if fp is None:
            res = FrameResult(k, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
            self.results.append(res)
            return res
        seg = self.segment(fp, k) if segmentation is SEGMENT else segmentation
        return self._advance(k, fp, seg)

    def _advance(self, k: int, fp: FramePairs, seg) -> FrameResult:
        cfg = self.config
        tids = fp.track_ids

        # candidate persistent labels; provisional (new) segments get ids <= -2
        candidates = {int(t): UNASSIGNED for t in tids}
        provisional = {}
        if seg is not None:
            if not self._has_history:
                cam_seg = identify_camera_model(seg, fp.P)
                mapping = {m.label: (STATIC if m.label == cam_seg else None) for m in seg.models}
            else:
                mapping = map_segments(seg, tids, self.window, cfg.min_share)
                if STATIC not in mapping.values():
                    free = [m for m in seg.models if mapping[m.label] is None]
                    if free:
                        mapping[max(free, key=lambda m: len(m.inliers)).label] = STATIC
            for m in seg.models:
                lab = mapping[m.label]
                if lab is None:
                    lab = -2 - len(provisional)
                    provisional[lab] = m.label
                for t in tids[seg.labels == m.label]:
                    candidates[int(t)] = lab
            self._has_history = True

        final = associate_labels(self.window, candidates)

        # sticky static label
        counts = {}
        for lab in final.values():
            counts[lab] = counts.get(lab, 0) + 1
        switch = self.selector.update(counts)
        if switch is not None:
            fresh = self._new_label()
            swap = {switch: STATIC, STATIC: fresh}
            self.window.relabel(swap)
            final = {t: swap.get(l, l) for t, l in final.items()}
            candidates = {t: swap.get(l, l) for t, l in candidates.items()}
            if switch in self.models:
                self.models[switch].retired = True
                self.retired_labels.add(switch)

        lab_arr = np.array([final[int(t)] for t in tids], dtype=np.int64)
        bg = lab_arr == STATIC
        try:
            update_camera(self.trajectory, fp.P[bg], fp.Q[bg], cfg.ransac_threshold,
                          seed=k, stereo=self._stereo(fp, bg), ransac_iterations=cfg.ransac_iterations)
        except Exception as exc:  # noqa: BLE001
            raise StageError(k, "camera", exc) from exc

        # resolve provisional segments
        resolved = {}
        taken = {l for l in final.values() if l >= 0}
        for tmp, seg_label in sorted(provisional.items(), reverse=True):
            mask = seg.labels == seg_label
            resolved[tmp] = self._resume_or_new(k, fp.Q[mask], taken)
            taken.add(resolved[tmp])
        if resolved:
            final = {t: resolved.get(l, l) for t, l in final.items()}
            candidates = {t: resolved.get(l, l) for t, l in candidates.items()}
            lab_arr = np.array([final[int(t)] for t in tids], dtype=np.int64)
        lab_arr[lab_arr < UNASSIGNED] = UNASSIGNED

        present = set(int(l) for l in np.unique(lab_arr) if l > STATIC)
        present = {l for l in present if (lab_arr == l).sum() >= 3}
        # birth needs a full-size segment for several consecutive frames
        big = {l for l in present if (lab_arr == l).sum() >= cfg.segmentation.min_cluster_size}
        for lab in list(self.streak):
            if lab not in big:
                del self.streak[lab]
        for lab in big:
            self.streak[lab] = self.streak.get(lab, 0) + 1
        spawn = {l for l in big if self.streak[l] >= cfg.birth_frames and l not in self.models}

        label_pairs = {}
        for lab in present:
            mask = lab_arr == lab
            label_pairs[lab] = LabelPairs(tids[mask], fp.P[mask], fp.Q[mask], self._stereo(fp, mask))
        try:
            update_object_models(self.models, label_pairs, self.trajectory, k, cfg.ransac_threshold,
                                 spawn=spawn, coast_limit=cfg.coast_limit, seed=k,
                                 ransac_iterations=cfg.ransac_iterations)
        except Exception as exc:  # noqa: BLE001
            raise StageError(k, "objects", exc) from exc
        for lab, m in self.models.items():
            if m.retired and lab not in self.retired_labels:
                self.retired_labels.add(lab)
                self.window.relabel({lab: UNASSIGNED})
                candidates = {t: (UNASSIGNED if l == lab else l) for t, l in candidates.items()}
                final = {t: (UNASSIGNED if l == lab else l) for t, l in final.items()}

        # tracks the segmentation left unassigned carry their associated label
        memo = {t: (l if l >= 0 else final[t]) for t, l in candidates.items()}
        self.window.push({t: l for t, l in memo.items() if l >= 0})
        res = FrameResult(k, tids, lab_arr, fp.gt_labels,
                          segment_count=0 if seg is None else len(seg.models),
                          camera_lost=self.trajectory.lost[-1])
        self.results.append(res)
        return res
