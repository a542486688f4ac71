"""Command-line entry point: ``dynscene <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config, load_scene_spec
from .geometry import GeometryError
from .io import DataError
from .recon import IoFailure
from .segmentation import NoModelsFound
from .tracking import StageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dynscene")


def _config(path) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig()


def cmd_simulate(args):
    out = pipeline.simulate(load_scene_spec(args.spec), args.out)
    print(f"wrote sequence to {out}")


def cmd_segment(args):
    seq = pipeline.load_sequence(args.seq)
    pipeline.segment_stage(seq, _config(args.config), args.out)
    print(f"wrote segmentations to {args.out}")


def cmd_track(args):
    seq = pipeline.load_sequence(args.seq)
    pipeline.track_stage(seq, _config(args.config), args.segments, args.out)
    print(f"wrote tracks to {args.out}")


def cmd_reconstruct(args):
    seq = pipeline.load_sequence(args.seq)
    export = pipeline.reconstruct_stage(seq, _config(args.config), args.tracks, args.out)
    print(f"static map: {len(export.static_map)} points; objects: "
          + ", ".join(f"{l}={len(m)}" for l, m in sorted(export.object_models.items())))


def cmd_evaluate(args):
    seq_info = pipeline.load_sequence(args.gt)
    summary = pipeline.evaluate_stage(args.est, args.gt, args.out, args.recon, seq_info.frame_rate)
    for k, v in summary.items():
        print(f"{k} = {v}")


def cmd_run(args):
    cfg = _config(args.config)
    scene = load_scene_spec(args.spec)
    _, summary = pipeline.run_pipeline(cfg, scene, args.out)
    for k, v in summary.items():
        print(f"{k} = {v}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynscene", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic stereo sequence with ground truth")
    s.add_argument("--spec", required=True, help="scene-spec file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("segment", help="per-frame multi-motion segmentation")
    s.add_argument("--seq", required=True, help="directory written by simulate")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("track", help="persistent labels, camera and object trajectories")
    s.add_argument("--seq", required=True)
    s.add_argument("--segments", required=True, help="directory written by segment")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("reconstruct", help="dense labels, static map and object models")
    s.add_argument("--seq", required=True)
    s.add_argument("--tracks", required=True, help="directory written by track")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="compare against simulator ground truth")
    s.add_argument("--est", required=True, help="directory written by track")
    s.add_argument("--gt", required=True, help="directory written by simulate")
    s.add_argument("--recon", help="directory written by reconstruct (adds IoU and overlap)")
    s.add_argument("--out", required=True, help="metrics CSV; the summary goes next to it")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="all stages end to end")
    s.add_argument("--spec", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IoFailure, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StageError, GeometryError, NoModelsFound, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
