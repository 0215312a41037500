"""CSV tables whose first line declares their schema.

The header comment has the form::

    # schema: <name> <col1>,<col2>,... [key=value ...]

followed by an ordinary CSV header row and data rows.  Readers check the
schema name and column list before parsing anything else.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from implab.exceptions import FormatError

SCHEMAS = {
    "path": ("gamma", "train_loss", "test_error"),
    "matrix": ("i", "j", "barrier"),
    "slice": ("x", "y", "error"),
    "density": ("node", "weight"),
    "phase": ("d", "probability", "trials"),
    "prediction": ("level", "R", "f_max", "measured_match"),
    "imp": ("level", "sparsity", "surviving", "test_error", "R", "ratio", "matching"),
    "theory": ("dim", "eps", "R", "d_star", "f_max", "n_nonpositive"),
    "robustness": ("level", "sparsity", "radius", "imp_barrier", "perturbed_barrier", "matching"),
    "cdf": ("variant", "level", "magnitude", "cdf"),
    "cdf_summary": ("level", "threshold", "wr", "lrr", "ft"),
    "adaptive": ("level", "sparsity", "ratio", "sweep_ratio", "flagged", "test_error", "matching"),
    "train": ("step", "train_loss", "train_error", "test_loss", "test_error"),
    "random_pruning": ("level", "ratio", "R", "f_max", "predicted_match", "test_error", "measured_match"),
    "curvature": ("level", "kind", "index", "curvature"),
    "onset": ("tau", "barrier", "stable"),
}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_table(path, schema: str, rows, meta: dict | None = None, columns=None) -> None:
    """Write dict-rows under a registered (or explicit) schema."""
    cols = tuple(columns) if columns is not None else SCHEMAS[schema]
    extra = "".join(f" {k}={json.dumps(v, separators=(',', ':'))}" for k, v in sorted((meta or {}).items()))
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema} {','.join(cols)}{extra}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def _parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_table(path, schema: str | None = None) -> tuple[dict, list[dict]]:
    """Return ``(meta, rows)``; raises ``FormatError`` on a missing or mismatched schema."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith("# schema: "):
            raise FormatError(f"{path}: missing schema header")
        parts = first[len("# schema: "):].split(" ")
        if len(parts) < 2:
            raise FormatError(f"{path}: malformed schema header")
        name, cols = parts[0], tuple(parts[1].split(","))
        if schema is not None and name != schema:
            raise FormatError(f"{path}: expected schema {schema!r}, found {name!r}")
        if name in SCHEMAS and cols != SCHEMAS[name]:
            raise FormatError(f"{path}: columns {cols} do not match schema {name!r}")
        meta = {}
        for item in parts[2:]:
            k, _, v = item.partition("=")
            try:
                meta[k] = json.loads(v)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: bad metadata item {item!r}") from exc
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != cols:
            raise FormatError(f"{path}: header row does not match the declared columns")
        rows = []
        for line in reader:
            if len(line) != len(cols):
                raise FormatError(f"{path}: row of {len(line)} fields, expected {len(cols)}")
            rows.append({c: _parse_value(v) for c, v in zip(cols, line)})
    meta["schema"] = name
    return meta, rows


def is_finite_number(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v)
