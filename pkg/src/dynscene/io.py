"""Text formats: per-frame correspondence files, trajectories, key-value manifests."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import Pose
from .sim import FrameObservation

SEQUENCE_HEADER = "# dymseq v1"
MANIFEST_HEADER = "# dynscene manifest v1"


class DataError(Exception):
    """Malformed or unreadable input data."""


class ParseError(DataError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class VersionMismatch(DataError):
    pass


# --------------------------------------------------------------------------- #
# sequences


def frame_filename(index: int) -> str:
    return f"frame_{index:06d}.txt"


def write_frame(path, obs: FrameObservation, with_labels: bool = True) -> None:
    lines = [SEQUENCE_HEADER]
    for i, tid in enumerate(obs.track_ids):
        ul, vl = obs.left_px[i]
        ur, vr = obs.right_px[i]
        row = f"{int(tid)} {ul:.6f} {vl:.6f} {ur:.6f} {vr:.6f}"
        if with_labels:
            row += f" {int(obs.gt_labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_frame(path, frame_index: int) -> FrameObservation:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise ParseError(path, 1, "missing header")
    head = lines[0].strip()
    if head != SEQUENCE_HEADER:
        if head.startswith("# dymseq"):
            raise VersionMismatch(f"{path}: unsupported sequence version {head!r}")
        raise ParseError(path, 1, f"expected header {SEQUENCE_HEADER!r}")
    ids, left, right, labels = [], [], [], []
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (5, 6):
            raise ParseError(path, no, f"expected 5 or 6 fields, got {len(parts)}")
        try:
            ids.append(int(parts[0]))
            vals = [float(x) for x in parts[1:5]]
            labels.append(int(parts[5]) if len(parts) == 6 else -1)
        except ValueError as exc:
            raise ParseError(path, no, str(exc)) from exc
        if not all(np.isfinite(vals)):
            raise ParseError(path, no, "non-finite coordinate")
        left.append(vals[:2])
        right.append(vals[2:])
    if len(set(ids)) != len(ids):
        raise ParseError(path, 1, "duplicate track id")
    return FrameObservation(
        frame_index=frame_index,
        track_ids=np.array(ids, dtype=np.int64),
        left_px=np.array(left, dtype=float).reshape(-1, 2),
        right_px=np.array(right, dtype=float).reshape(-1, 2),
        gt_labels=np.array(labels, dtype=np.int64),
    )


def write_sequence(directory, frames, with_labels: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for obs in frames:
        write_frame(d / frame_filename(obs.frame_index), obs, with_labels)


def read_sequence(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"sequence directory not found: {d}")
    files = sorted(d.glob("frame_*.txt"))
    frames = []
    for k, f in enumerate(files):
        try:
            idx = int(f.stem.split("_")[1])
        except ValueError as exc:
            raise DataError(f"bad frame file name {f.name}") from exc
        if idx != k:
            raise DataError(f"frame files are not consecutive from 0 (found {f.name})")
        frames.append(read_frame(f, k))
    return frames


# --------------------------------------------------------------------------- #
# trajectories


def write_trajectory(path, timestamps, poses) -> None:
    lines = []
    for ts, T in zip(timestamps, poses):
        t, q = T.trans, T.quat
        lines.append(" ".join(f"{x:.9f}" for x in (ts, *t, *q)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_trajectory(path):
    """Returns ``(timestamps, poses)``."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    stamps, poses = [], []
    for no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 8:
            raise ParseError(path, no, f"expected 8 fields, got {len(parts)}")
        try:
            v = [float(x) for x in parts]
            poses.append(Pose(np.array(v[4:8]), np.array(v[1:4])))
        except ValueError as exc:
            raise ParseError(path, no, str(exc)) from exc
        stamps.append(v[0])
    return np.array(stamps), poses


# --------------------------------------------------------------------------- #
# key-value files (manifests, summaries)


def write_key_values(path, items: dict, header: str = MANIFEST_HEADER) -> None:
    lines = [header] + [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path) -> dict:
    out = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ParseError(path, no, "expected 'key = value'")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out
