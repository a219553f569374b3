"""Event, key and identifier types shared by the whole package.

Output events are serialized as one JSON object per line with a fixed field
order (``seq, table, op, key, row, origin, lsn, version``).  ``row`` is left
out for deletes and ``lsn`` is left out for dump rows, which have no log
position.
"""

from __future__ import annotations

import json
import re
import uuid
from dataclasses import dataclass
from typing import Any, Optional, Union

Scalar = Union[int, str, bool, None]
KeyPart = Union[int, str]
Key = tuple  # tuple[KeyPart, ...]
Row = dict  # dict[str, Scalar], insertion-ordered

OPS = ("create", "update", "delete")
ORIGINS = ("log", "dump")
MAX_U64 = 2**64 - 1

WATERMARK_TABLE = "_dblog.watermark"

FIELDS = ("seq", "table", "op", "key", "row", "origin", "lsn", "version")


class EventFormatError(ValueError):
    """Base class for output line encoding problems."""


class MalformedLineError(EventFormatError):
    def __init__(self, field: Optional[str], detail: str):
        self.field = field
        where = f"field {field!r}" if field else "line"
        super().__init__(f"malformed {where}: {detail}")


class UnknownOpError(EventFormatError):
    def __init__(self, op: Any):
        self.op = op
        super().__init__(f"unknown op {op!r}")


class KeyMismatchError(TypeError):
    """Keys of different arity or component types were compared."""


def _is_key_part(v: Any) -> bool:
    return isinstance(v, (int, str)) and not isinstance(v, bool)


def make_key(parts) -> Key:
    key = tuple(parts)
    if not key:
        raise ValueError("primary key must have at least one component")
    for part in key:
        if not _is_key_part(part):
            raise TypeError(f"key component {part!r} is not an int or str")
    return key


def compare_keys(a: Key, b: Key) -> int:
    """Return -1, 0 or 1 comparing two primary keys component-wise.

    Text components compare by code point, which for UTF-8 is the same as
    byte order.
    """
    if len(a) != len(b):
        raise KeyMismatchError(f"arity mismatch: {a!r} vs {b!r}")
    for x, y in zip(a, b):
        if type(x) is not type(y) or not _is_key_part(x):
            raise KeyMismatchError(f"component type mismatch: {x!r} vs {y!r}")
        if x < y:
            return -1
        if x > y:
            return 1
    return 0


def _check_u64(name: str, value: Any) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= MAX_U64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value!r}")


@dataclass(frozen=True, slots=True)
class LogEvent:
    """One committed row change read from the source log."""

    lsn: int
    table: str
    op: str
    key: Key
    row: Optional[Row]
    version: int
    is_watermark: bool = False
    watermark_value: Optional[uuid.UUID] = None

    def __post_init__(self):
        _check_u64("lsn", self.lsn)
        if self.op not in OPS:
            raise UnknownOpError(self.op)
        if self.version < 1:
            raise ValueError("version must be >= 1")
        if self.is_watermark:
            if self.table != WATERMARK_TABLE or self.watermark_value is None:
                raise ValueError("watermark events live in the watermark table and carry a value")
        elif self.watermark_value is not None:
            raise ValueError("only watermark events carry a watermark value")
        if (self.op == "delete") != (self.row is None):
            raise ValueError("delete events have no row image; other ops must have one")


@dataclass(frozen=True, slots=True)
class OutputEvent:
    """The single delivery format used for both log and dump events."""

    seq: int
    table: str
    op: str
    key: Key
    row: Optional[Row]
    origin: str
    lsn: Optional[int]
    version: int

    def __post_init__(self):
        _check_u64("seq", self.seq)
        _check_u64("version", self.version)
        if self.op not in OPS:
            raise UnknownOpError(self.op)
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.table == WATERMARK_TABLE:
            raise ValueError("watermark events are never output")
        if (self.op == "delete") != (self.row is None):
            raise ValueError("delete events have no row image; other ops must have one")
        if self.origin == "dump":
            if self.op != "update" or self.lsn is not None:
                raise ValueError("dump rows are updates without an lsn")
        else:
            _check_u64("lsn", self.lsn)


@dataclass(frozen=True, slots=True)
class WatermarkPair:
    lw: uuid.UUID
    hw: uuid.UUID

    def __post_init__(self):
        if self.lw == self.hw:
            raise ValueError("low and high watermark must differ")


def encode_output_event(e: OutputEvent) -> str:
    obj: dict[str, Any] = {"seq": e.seq, "table": e.table, "op": e.op, "key": list(e.key)}
    if e.row is not None:
        obj["row"] = e.row
    obj["origin"] = e.origin
    if e.lsn is not None:
        obj["lsn"] = e.lsn
    obj["version"] = e.version
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


_FIELD_RE = re.compile(r'"(%s)":' % "|".join(FIELDS))


def _field_at(line: str, pos: int) -> Optional[str]:
    # the last top-level field name before a parse error is the one being read
    found = None
    for m in _FIELD_RE.finditer(line, 0, pos):
        found = m.group(1)
    return found


def _scalar(v: Any) -> bool:
    return v is None or isinstance(v, (int, str, bool))


def decode_output_event(line: str) -> OutputEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLineError(_field_at(line, exc.pos), exc.msg) from None
    if not isinstance(obj, dict):
        raise MalformedLineError(None, "not a JSON object")
    for name in obj:
        if name not in FIELDS:
            raise MalformedLineError(name, "unexpected field")

    def need(name, check, what):
        if name not in obj:
            raise MalformedLineError(name, "missing")
        v = obj[name]
        if not check(v):
            raise MalformedLineError(name, f"expected {what}, got {v!r}")
        return v

    def u64(v):
        return isinstance(v, int) and not isinstance(v, bool) and 0 <= v <= MAX_U64

    seq = need("seq", u64, "unsigned integer")
    table = need("table", lambda v: isinstance(v, str) and v, "table name")
    op = need("op", lambda v: isinstance(v, str), "string")
    if op not in OPS:
        raise UnknownOpError(op)
    key = need("key", lambda v: isinstance(v, list) and v and all(_is_key_part(p) for p in v), "key list")
    row = None
    if op != "delete":
        row = need("row", lambda v: isinstance(v, dict) and all(_scalar(x) for x in v.values()), "row object")
    elif "row" in obj:
        raise MalformedLineError("row", "delete events carry no row")
    origin = need("origin", lambda v: v in ORIGINS, "log or dump")
    lsn = None
    if origin == "log":
        lsn = need("lsn", u64, "unsigned integer")
    elif "lsn" in obj:
        raise MalformedLineError("lsn", "dump rows carry no lsn")
    version = need("version", u64, "unsigned integer")
    try:
        return OutputEvent(seq, table, op, tuple(key), row, origin, lsn, version)
    except ValueError as exc:
        raise MalformedLineError(None, str(exc)) from None
