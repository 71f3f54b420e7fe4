"""Deterministic artifact I/O: JSON and CSV with 17-significant-digit floats.

Writing every float with %.17g guarantees exact 64-bit round-trips and
byte-identical files across reruns; insertion order of dicts is preserved.
"""

from __future__ import annotations

import json
import math
import os
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .nets import ModelSpec
from .trees import ParamTree, tree_map


def fmt_float(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return format(value, ".17g")


def _emit(obj, parts: list, indent: int, level: int) -> None:
    pad = " " * (indent * level)
    pad_in = " " * (indent * (level + 1))
    if isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, (key, val) in enumerate(obj.items()):
            parts.append(f"{pad_in}{json.dumps(str(key))}: ")
            _emit(val, parts, indent, level + 1)
            parts.append(",\n" if i < len(obj) - 1 else "\n")
        parts.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        seq = list(obj)
        if not seq:
            parts.append("[]")
            return
        parts.append("[")
        for i, val in enumerate(seq):
            _emit(val, parts, indent, level + 1)
            if i < len(seq) - 1:
                parts.append(", ")
        parts.append("]")
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts, indent, level)
    elif isinstance(obj, bool) or obj is None:
        parts.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(fmt_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_json(obj, indent: int = 2) -> str:
    parts: list = []
    _emit(obj, parts, indent, 0)
    parts.append("\n")
    return "".join(parts)


def write_json(path: str, obj) -> str:
    with open(path, "w") as fh:
        fh.write(to_json(obj))
    return path


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """CSV with 17-significant-digit floats; header first."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, (float, np.floating)):
                cells.append("nan" if math.isnan(cell) else fmt_float(cell))
            elif isinstance(cell, (int, np.integer, bool)):
                cells.append(str(cell))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def save_checkpoint(path: str, model: ModelSpec, params: ParamTree, meta: dict) -> str:
    payload = {
        "model": model.to_dict(),
        "params": tree_map(lambda leaf: leaf, params),
        "meta": meta,
    }
    return write_json(path, payload)


def load_checkpoint(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    payload = read_json(path)
    model = ModelSpec.from_dict(payload["model"])
    params = tree_map(lambda leaf: np.asarray(leaf, dtype=np.float64), payload["params"])
    return model, params, payload.get("meta", {})
