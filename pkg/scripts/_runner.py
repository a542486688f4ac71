"""Shared plumbing for the experiment scripts: dataclass configs from the command line."""
from __future__ import annotations

import argparse
import csv
import dataclasses
from pathlib import Path


def parse_config(cls, argv=None, description: str | None = None):
    """Build ``cls`` from ``--field value`` flags; every dataclass field becomes a flag."""
    parser = argparse.ArgumentParser(description=description or cls.__doc__)
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            parser.add_argument(f"--{f.name}", type=lambda s: s.lower() in ("1", "true", "yes"),
                                default=default)
        elif isinstance(default, (list, tuple)):
            kind = type(default[0]) if default else str
            parser.add_argument(f"--{f.name}", type=kind, nargs="+", default=list(default))
        else:
            parser.add_argument(f"--{f.name}", type=type(default), default=default)
    return cls(**vars(parser.parse_args(argv)))


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path
