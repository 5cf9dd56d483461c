"""Fit results as JSON documents."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np


def _clean(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):  # enums
        return obj.value
    return obj


def fit_document(kind: str, result, input_hashes, params: dict | None = None) -> dict:
    """Self-contained record of one analysis: inputs, settings and results."""
    return {
        "kind": kind,
        "inputs": sorted(input_hashes),
        "params": _clean(params or {}),
        "result": _clean(result),
    }


def write_document(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")
    return path
