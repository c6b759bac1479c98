"""Canonical JSON encoding and a strict decoder for untrusted input."""
from __future__ import annotations

import base64
import binascii
import json
from typing import Any

from .errors import EncodingError, SchemaError


def _check_representable(obj: Any, path: str = "$") -> None:
    if obj is None or isinstance(obj, (bool, str)):
        return
    if isinstance(obj, int):
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _check_representable(item, f"{path}[{i}]")
        return
    if isinstance(obj, dict):
        for key, value in obj.items():
            if not isinstance(key, str):
                raise EncodingError(f"non-string key at {path}")
            _check_representable(value, f"{path}.{key}")
        return
    raise EncodingError(f"value of type {type(obj).__name__} at {path} has no canonical form")


def canonical_json(obj: Any) -> bytes:
    """UTF-8 JSON, keys sorted, no insignificant whitespace, integers only."""
    _check_representable(obj)
    try:
        text = json.dumps(obj, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False)
        return text.encode("utf-8")
    except (UnicodeEncodeError, ValueError) as exc:
        raise EncodingError(str(exc)) from exc


def _reject_duplicates(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise SchemaError(f"duplicate key {key!r}")
        obj[key] = value
    return obj


def _reject_float(text):
    raise SchemaError(f"non-integer number {text!r}")


def _reject_constant(text):
    raise SchemaError(f"invalid JSON constant {text!r}")


def load_json_strict(raw: bytes) -> Any:
    """Decode untrusted JSON bytes, refusing floats, NaN and duplicate keys.

    Raises SchemaError for anything that is not strict UTF-8 JSON.
    """
    try:
        text = raw.decode("utf-8")
        return json.loads(text, object_pairs_hook=_reject_duplicates,
                          parse_float=_reject_float, parse_constant=_reject_constant)
    except SchemaError:
        raise
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode_strict(text: Any, what: str) -> bytes:
    """Decode standard base64, rejecting non-canonical encodings."""
    if not isinstance(text, str):
        raise SchemaError(f"{what}: expected base64 string")
    try:
        data = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise SchemaError(f"{what}: invalid base64") from exc
    if b64encode(data) != text:
        raise SchemaError(f"{what}: non-canonical base64")
    return data


def is_lower_hex(text: Any, length: int) -> bool:
    return (isinstance(text, str) and len(text) == length
            and all(c in "0123456789abcdef" for c in text))


def expect_keys(obj: Any, required: set[str], optional: set[str] = frozenset(),
                what: str = "object") -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{what}: expected JSON object")
    keys = set(obj)
    missing = required - keys
    extra = keys - required - set(optional)
    if missing:
        raise SchemaError(f"{what}: missing field(s) {sorted(missing)}")
    if extra:
        raise SchemaError(f"{what}: unknown field(s) {sorted(extra)}")
    return obj


def expect_int(value: Any, what: str, lo: int = 0, hi: int = 2**63 - 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{what}: expected integer")
    if not lo <= value <= hi:
        raise SchemaError(f"{what}: {value} outside [{lo}, {hi}]")
    return value
