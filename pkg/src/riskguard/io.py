"""Newline-delimited JSON records and JSON summary documents.

Floats are written with Python's shortest round-trip representation (at
most 17 significant digits); infinities are written as the strings
``"inf"`` / ``"-inf"`` so the +inf calibration atom survives a round trip.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import DimensionMismatch, Example, MultiLabelExample, RiskguardError, make_prob_vector

_SEP = (",", ":")


class RecordError(RiskguardError):
    pass


def to_jsonable(obj):
    """Convert numpy scalars/arrays, tuples, sets and non-finite floats to JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(to_jsonable(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def from_jsonable(obj):
    """Inverse of :func:`to_jsonable` for the special float strings."""
    if isinstance(obj, dict):
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(v) for v in obj]
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


def dumps_line(obj) -> str:
    return json.dumps(to_jsonable(obj), separators=_SEP, allow_nan=False)


def dumps_document(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def example_to_record(ex) -> dict:
    if isinstance(ex, MultiLabelExample):
        return {"id": ex.id, "scores": list(ex.item_scores), "positives": sorted(ex.positives)}
    rec = {"id": ex.id}
    if ex.features:
        rec["features"] = list(ex.features)
    rec["cloud"] = list(ex.cloud_dist.probs)
    rec["edge"] = list(ex.edge_dist.probs)
    if ex.label is not None:
        rec["label"] = ex.label
    return rec


def _numbers(rec: dict, key: str) -> tuple[float, ...]:
    vals = rec[key]
    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                             for v in vals):
        raise RecordError(f"field {key!r} must be an array of numbers")
    return tuple(float(v) for v in vals)


def record_to_example(rec: dict):
    if not isinstance(rec, dict) or "id" not in rec:
        raise RecordError("record must be an object with an integer id")
    if not isinstance(rec["id"], int) or isinstance(rec["id"], bool):
        raise RecordError("record id must be an integer")
    if "scores" in rec:
        unknown = set(rec) - {"id", "scores", "positives"}
        if unknown:
            raise RecordError(f"unknown record fields {sorted(unknown)}")
        positives = rec.get("positives", [])
        if not all(isinstance(p, int) and not isinstance(p, bool) for p in positives):
            raise RecordError("positives must be integers")
        return MultiLabelExample(rec["id"], _numbers(rec, "scores"), frozenset(positives))
    unknown = set(rec) - {"id", "features", "cloud", "edge", "label"}
    if unknown:
        raise RecordError(f"unknown record fields {sorted(unknown)}")
    try:
        cloud, edge = _numbers(rec, "cloud"), _numbers(rec, "edge")
    except KeyError as exc:
        raise RecordError(f"record {rec['id']} lacks field {exc}") from None
    label = rec.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
        raise RecordError("label must be an integer")
    feats = _numbers(rec, "features") if "features" in rec else ()
    return Example(rec["id"], make_prob_vector(cloud), make_prob_vector(edge), feats, label)


def parse_records(lines: Iterable[str]) -> list:
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(f"line {n}: {exc}") from None
        try:
            out.append(record_to_example(rec))
        except RiskguardError as exc:
            raise type(exc)(f"line {n}: {exc}") from None
    _check_homogeneous(out)
    return out


def _check_homogeneous(examples: list) -> None:
    if not examples:
        return
    kinds = {type(e) for e in examples}
    if len(kinds) > 1:
        raise RecordError("file mixes classification and multi-label records")
    if isinstance(examples[0], Example):
        sizes = {len(e.cloud_dist) for e in examples}
        dims = {len(e.features) for e in examples}
    else:
        sizes = {len(e.item_scores) for e in examples}
        dims = {0}
    if len(sizes) > 1:
        raise DimensionMismatch("records differ in label-space size")
    if len(dims) > 1:
        raise DimensionMismatch("records differ in feature dimension")


def serialize_records(examples: Iterable) -> str:
    return "".join(dumps_line(example_to_record(e)) + "\n" for e in examples)


def read_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_records(fh)


def write_records(path, examples: Iterable) -> None:
    Path(path).write_text(serialize_records(examples), encoding="utf-8")


def classification_arrays(examples: list[Example]) -> dict[str, np.ndarray]:
    """Stack classification examples into arrays (labels are -1 when absent)."""
    return {
        "ids": np.array([e.id for e in examples], dtype=np.int64),
        "cloud": np.array([e.cloud_dist.probs for e in examples], dtype=float),
        "edge": np.array([e.edge_dist.probs for e in examples], dtype=float),
        "features": np.array([e.features for e in examples], dtype=float).reshape(
            len(examples), len(examples[0].features) if examples else 0),
        "labels": np.array([-1 if e.label is None else e.label for e in examples], dtype=np.int64),
    }
