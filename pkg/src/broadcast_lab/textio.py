"""Deterministic text rendering: JSON and CSV with 17 significant digits."""

from __future__ import annotations

import json
import math
from typing import Any, Iterable, Sequence

import numpy as np

DIGITS = 17


def fmt_real(x: float) -> str:
    """Render a real number with 17 significant digits (round-trip exact)."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    if x == 0.0:
        return "0"  # also folds -0.0, keeping output byte-stable
    return format(x, f".{DIGITS}g")


def _render(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1)) if indent else ""
    end = " " * (indent * level) if indent else ""
    nl = "\n" if indent else ""
    sep = ": " if indent else ":"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_real(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _render(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}{sep}{_render(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + nl + ("," + nl).join(items) + nl + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric leaves stay on one line so matrices remain readable
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_render(v, 0, 0) for v in obj) + "]"
        items = [pad + _render(v, indent, level + 1) for v in obj]
        return "[" + nl + ("," + nl).join(items) + nl + end + "]"
    raise TypeError(f"cannot render {type(obj).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with every float printed at 17 significant digits."""
    return _render(obj, indent, 0) + "\n"


def loads(text: str) -> Any:
    return json.loads(text)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Comma-separated text; floats rendered by :func:`fmt_real`."""
    out = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(fmt_real(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"
