"""JSON codec for instance, dataset, policy and config files.

Floats are written in shortest round-trip form, so every double read back
is bit-identical to the one written.
"""

from pathlib import Path

import numpy as np

from services.errors import ParseError

try:
    import orjson as json

    def _json_loads(x):
        return json.loads(x)

    def _json_dumps(x):
        return json.dumps(
            x, option=json.OPT_INDENT_2 | json.OPT_SERIALIZE_NUMPY
        ).decode("utf-8")

    def _json_dumps_line(x):
        return json.dumps(x, option=json.OPT_SERIALIZE_NUMPY).decode("utf-8")

    _DecodeError = json.JSONDecodeError

except ImportError:
    import json

    def _json_loads(x):
        return json.loads(x)

    def _json_dumps(x):
        return json.dumps(x, indent=2, default=_to_plain)

    def _json_dumps_line(x):
        return json.dumps(x, separators=(",", ":"), default=_to_plain)

    _DecodeError = json.JSONDecodeError


def _to_plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_plain(value):
    """Recursively converts numpy containers into JSON-ready lists and scalars."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, (np.ndarray, np.generic)):
        return _to_plain(value)
    return value


def read_json(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ParseError(f"{path}: cannot read file: {e}") from e
    try:
        return _json_loads(raw)
    except _DecodeError as e:
        raise ParseError(f"{path}: malformed JSON: {e}") from e


def write_json(path, document) -> None:
    Path(path).write_text(_json_dumps(to_plain(document)) + "\n", encoding="utf-8")


def dumps(document, compact: bool = False) -> str:
    if compact:
        return _json_dumps_line(to_plain(document))
    return _json_dumps(to_plain(document))


def loads(text):
    try:
        return _json_loads(text)
    except _DecodeError as e:
        raise ParseError(f"malformed JSON: {e}") from e
