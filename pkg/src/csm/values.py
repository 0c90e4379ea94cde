"""Dynamically typed runtime values and their JSON wire encoding.

A value is one of: None, bool, int (64-bit signed), float, str, list of
values, dict mapping str to value, or bytes. Plain Python objects are used
directly; this module supplies the type discipline around them (structural
equality with int/float promotion, 64-bit range checks) and the JSON
encoding shared by event payloads and the key-value store protocol.
"""

from __future__ import annotations

import base64
from typing import Any

Value = Any  # None | bool | int | float | str | list | dict[str, Value] | bytes

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


def type_name(v: Value) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    if isinstance(v, float):
        return "float"
    if isinstance(v, str):
        return "string"
    if isinstance(v, bytes):
        return "bytes"
    if isinstance(v, list):
        return "list"
    if isinstance(v, dict):
        return "map"
    raise TypeError(f"not a runtime value: {v!r}")


def is_number(v: Value) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def check_int64(n: int) -> int:
    """Reject integer results outside the signed 64-bit range."""
    if n < INT64_MIN or n > INT64_MAX:
        raise OverflowError(f"integer result {n} outside 64-bit range")
    return n


def values_equal(a: Value, b: Value) -> bool:
    """Structural equality; int and float compare by numeric value, but bool
    never equals int (Python's bool-is-int coercion is deliberately not
    exposed to the expression language)."""
    if is_number(a) and is_number(b):
        return float(a) == float(b)
    if type(a) is not type(b):
        return False
    if isinstance(a, list):
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict):
        if a.keys() != b.keys():
            return False
        return all(values_equal(a[k], b[k]) for k in a)
    return a == b


def to_jsonable(v: Value) -> Any:
    """Convert a value to plain JSON-serializable data. Bytes become a tagged
    base64 object so the encoding stays reversible."""
    if isinstance(v, bytes):
        return {"$bytes": base64.b64encode(v).decode("ascii")}
    if isinstance(v, list):
        return [to_jsonable(x) for x in v]
    if isinstance(v, tuple):
        return [to_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: to_jsonable(x) for k, x in v.items()}
    if v is None or isinstance(v, (bool, int, float, str)):
        return v
    raise TypeError(f"not a runtime value: {v!r}")


def from_jsonable(data: Any) -> Value:
    """Inverse of to_jsonable."""
    if isinstance(data, dict):
        if set(data.keys()) == {"$bytes"}:
            return base64.b64decode(data["$bytes"])
        return {k: from_jsonable(x) for k, x in data.items()}
    if isinstance(data, list):
        return [from_jsonable(x) for x in data]
    return data


def copy_value(v: Value) -> Value:
    """Deep copy so values delivered across instances never alias."""
    if isinstance(v, list):
        return [copy_value(x) for x in v]
    if isinstance(v, dict):
        return {k: copy_value(x) for k, x in v.items()}
    return v
