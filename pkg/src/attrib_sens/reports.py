"""Report files (CSV rows + JSON aggregates) and heatmap PNGs."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .harness import ACCURACY_METRICS, ALL_METRICS, REPORT_COLUMNS, Row

FLOAT_FORMAT = ".9g"


def format_value(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return format(value, FLOAT_FORMAT)
    return str(value)


def _round_floats(obj):
    """Recursively round floats to 9 significant digits for JSON output."""
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            return None
        return float(format(value, FLOAT_FORMAT))
    return obj


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([format_value(v) for v in r.values()])
    return buf.getvalue()


def dumps_json(obj):
    return json.dumps(_round_floats(obj), indent=2, sort_keys=True) + "\n"


def write_report(rows, aggregates, path, meta=None):
    """Write ``<path>.csv`` and ``<path>.json``; returns both paths.

    An empty row set gives a header-only CSV and null aggregates.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv")
    json_path = path.with_suffix(".json")
    rows = list(rows)
    csv_path.write_text(rows_to_csv(rows))
    doc = dict(meta or {})
    doc["row_count"] = len(rows)
    doc["columns"] = list(REPORT_COLUMNS)
    doc["aggregates"] = aggregates if rows else None
    json_path.write_text(dumps_json(doc))
    return csv_path, json_path


def _parse_cell(text, column):
    if text == "":
        return None
    if column in ALL_METRICS:
        return float(text)
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_report_rows(csv_path):
    """Parse a report CSV back into rows.  ``order`` is recovered as the position of
    each row within its (image, model) group, which is the sweep position."""
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected columns {reader.fieldnames}")
        rows = []
        seen = {}
        for rec in reader:
            vals = {c: _parse_cell(rec[c], c) for c in REPORT_COLUMNS}
            for c in ("model_id", "method", "swept_field"):
                vals[c] = rec[c]
            key = (vals["image_id"], vals["model_id"])
            order = seen.get(key, 0)
            seen[key] = order + 1
            rows.append(Row(order=order, **vals))
    return rows


def read_report_json(json_path):
    return json.loads(Path(json_path).read_text())


# ----------------------------------------------------------------------
# heatmap PNGs


def colorize(values, range_tag="signed_unit"):
    """8-bit RGB: blue-white-red over [-1, 1]; black-white over [0, 1] for masks."""
    v = np.asarray(values, dtype=np.float64)
    if range_tag == "mask_unit":
        g = np.clip(v, 0.0, 1.0)
        rgb = np.stack([g, g, g], axis=-1)
    else:
        v = np.clip(v, -1.0, 1.0)
        neg = np.minimum(v, 0.0)
        pos = np.maximum(v, 0.0)
        rgb = np.stack([1.0 + neg, 1.0 - np.abs(v), 1.0 - pos], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def write_heatmap_png(values, path, range_tag="signed_unit"):
    from matplotlib import image as mpimg

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mpimg.imsave(path, colorize(values, range_tag))
    return path


def accuracy_columns_present(rows):
    return [m for m in ACCURACY_METRICS if any(getattr(r, m) is not None for r in rows)]
