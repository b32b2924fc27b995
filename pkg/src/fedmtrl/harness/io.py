"""Metric CSVs and run metadata."""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np


def format_value(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, fields, rows):
    """Write dict rows with a fixed header; absent values become empty fields."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([format_value(row.get(k)) for k in fields])


def read_csv(path):
    """Parse a metrics CSV back into dicts of floats (``None`` for empty fields)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in reader]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def content_hash(config: dict, arrays) -> str:
    """sha256 over the canonical config JSON and the raw bytes of the problem arrays."""
    h = hashlib.sha256()
    h.update(json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":")).encode())
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_json(path, doc):
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
