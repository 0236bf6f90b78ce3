"""Byte-deterministic artifact writers.

All CSV files are UTF-8 with a header row; floats are rendered with 17
significant digits so checkpoints and logs round-trip exactly and two
runs with the same seed produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import os


def fmt(value) -> str:
    """Full-double-precision text for a cell; empty for missing."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    v = float(value)
    if math.isnan(v):
        return ""
    return format(v, ".17g")


def write_csv(path, columns, rows) -> None:
    """rows: iterable of dicts keyed by the column names."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row.get(c)) for c in columns) + "\n")


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def prepare_run_dir(path, force: bool = False) -> str:
    """Create the run directory; refuse to reuse a non-empty one unless
    forced (artifacts are append-only within a run)."""
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise FileExistsError(
            f"output directory {path!r} is not empty; pass --force to overwrite"
        )
    os.makedirs(path, exist_ok=True)
    return path
