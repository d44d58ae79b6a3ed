"""Canonical JSON output for model files, manifests and config echoes.

The stdlib encoder prints floats with shortest round-trip repr; the on-disk
formats here pin floats to 17 significant digits instead (also lossless for
64-bit values) and sort object keys, so re-saving a loaded document is
byte-identical.  Parsing uses plain json.load.
"""

from __future__ import annotations

import hashlib
import json

from .errors import ParseError


def format_float(x: float) -> str:
    if not (x == x and abs(x) != float("inf")):
        raise ValueError(f"non-finite value cannot be serialized: {x}")
    text = format(float(x), ".17g")
    # keep the value recognisably a float when .17g drops the point
    if "." not in text and "e" not in text and "E" not in text:
        text += ".0"
    return text


def _encode(value, indent: int, out: list) -> None:
    pad = "  " * indent
    if value is None or isinstance(value, bool):
        out.append(json.dumps(value))
    elif isinstance(value, float):
        out.append(format_float(value))
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, str):
        out.append(json.dumps(value))
    elif isinstance(value, (list, tuple)):
        items = list(value)
        if not items:
            out.append("[]")
        elif all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in items):
            out.append("[" + ", ".join(
                format_float(v) if isinstance(v, float) else str(v) for v in items
            ) + "]")
        else:
            out.append("[\n")
            for i, item in enumerate(items):
                out.append(pad + "  ")
                _encode(item, indent + 1, out)
                out.append(",\n" if i < len(items) - 1 else "\n")
            out.append(pad + "]")
    elif isinstance(value, dict):
        if not value:
            out.append("{}")
        else:
            keys = sorted(value.keys())
            out.append("{\n")
            for i, key in enumerate(keys):
                if not isinstance(key, str):
                    raise ValueError(f"object keys must be strings, got {key!r}")
                out.append(pad + "  " + json.dumps(key) + ": ")
                _encode(value[key], indent + 1, out)
                out.append(",\n" if i < len(keys) - 1 else "\n")
            out.append(pad + "}")
    else:
        raise ValueError(f"cannot serialize value of type {type(value).__name__}")


def dumps(value) -> str:
    out: list = []
    _encode(value, 0, out)
    out.append("\n")
    return "".join(out)


def dump(value, path) -> None:
    text = dumps(value)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def content_hash(value) -> str:
    """Short stable hash of a JSON-serializable value, for output dirs."""
    return hashlib.sha256(dumps(value).encode("utf-8")).hexdigest()[:12]
