"""In-memory source database with a commit-ordered change log.

The simulator offers what the capture engine needs from a real database:
row changes emitted from one linear history in commit order, and reads that
see everything committed before them.  Every put/delete is its own
single-row transaction.  Point-in-time reads are answered from per-key
version chains stamped with the LSN of each write, so ``as_of`` reads cost a
binary search per key.
"""

from __future__ import annotations

import bisect
import threading
import uuid
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import WATERMARK_TABLE, Key, LogEvent, Row, make_key

WATERMARK_KEY = (1,)


class SourceError(Exception):
    pass


class UnknownTableError(SourceError, KeyError):
    pass


class SchemaError(SourceError, ValueError):
    pass


class MissingRowError(SourceError, KeyError):
    pass


class RetentionError(SourceError):
    """The requested log position has already been truncated."""


class ReadBeyondHeadError(SourceError, ValueError):
    pass


@dataclass
class SimTable:
    name: str
    schema: list[str]
    pk_columns: list[str]
    # key -> list of (lsn, row or None, version); never shrinks
    chains: dict = field(default_factory=dict)
    sorted_keys: list = field(default_factory=list)
    live: dict = field(default_factory=dict)
    key_types: Optional[tuple] = None

    def key_of(self, row: Row) -> Key:
        return tuple(row[c] for c in self.pk_columns)

    def check_key(self, key: Key) -> Key:
        key = make_key(key)
        types = tuple(type(p) for p in key)
        if len(key) != len(self.pk_columns):
            raise SchemaError(f"{self.name}: key {key!r} has wrong arity")
        if self.key_types is None:
            self.key_types = types
        elif types != self.key_types:
            raise SchemaError(f"{self.name}: key {key!r} has wrong component types")
        return key

    def version_as_of(self, key: Key, as_of: int):
        chain = self.chains.get(key)
        if not chain:
            return None
        if chain[-1][0] <= as_of:
            entry = chain[-1]
        else:
            i = bisect.bisect_right(chain, as_of, key=lambda c: c[0])
            if i == 0:
                return None
            entry = chain[i - 1]
        if entry[1] is None:
            return None
        return entry


class LogCursor:
    """Reads committed events with LSN strictly greater than ``position``."""

    def __init__(self, db: "SimDatabase", position: int):
        self.db = db
        self.position = position

    def next(self) -> Optional[LogEvent]:
        e = self.db._read_log(self.position + 1)
        if e is not None:
            self.position = e.lsn
        return e

    def at_head(self) -> bool:
        return self.position >= self.db.head_lsn

    def __iter__(self):
        while (e := self.next()) is not None:
            yield e


class SimDatabase:
    def __init__(self, retention: Optional[int] = None):
        self.tables: dict[str, SimTable] = {}
        self.log: list[LogEvent] = []
        self.next_lsn = 1
        self.retention = retention
        self._floor = 0  # number of log entries truncated from the front
        self._lock = threading.Lock()
        # (actor, table) -> number of row/table locks taken
        self.locks = Counter()
        # the single watermark row is created with the database, before any capture starts
        self.watermark_row = uuid.UUID(int=0)
        self._watermark_version = 1

    @property
    def head_lsn(self) -> int:
        return self.next_lsn - 1

    @property
    def retention_floor(self) -> int:
        """Lowest LSN a new cursor may start from."""
        return self._floor

    def create_table(self, name: str, schema: Iterable[str], pk: Iterable[str]) -> SimTable:
        schema, pk = list(schema), list(pk)
        if name in self.tables or name == WATERMARK_TABLE:
            raise SchemaError(f"table {name!r} already exists")
        if name.startswith("_dblog."):
            raise SchemaError("the _dblog namespace is reserved")
        if not pk:
            raise SchemaError(f"table {name!r}: a primary key is required")
        if len(set(schema)) != len(schema):
            raise SchemaError(f"table {name!r}: duplicate column")
        if len(set(pk)) != len(pk) or not set(pk) <= set(schema):
            raise SchemaError(f"table {name!r}: primary key must be distinct schema columns")
        table = SimTable(name, schema, pk)
        self.tables[name] = table
        return table

    def table(self, name: str) -> SimTable:
        try:
            return self.tables[name]
        except KeyError:
            raise UnknownTableError(name) from None

    def _append(self, table: str, op: str, key: Key, row, version: int, **wm) -> LogEvent:
        e = LogEvent(self.next_lsn, table, op, key, row, version, **wm)
        self.log.append(e)
        self.next_lsn += 1
        if self.retention is not None and len(self.log) > self.retention:
            drop = len(self.log) - self.retention
            del self.log[:drop]
            self._floor += drop
        return e

    def put(self, table: str, key: Key, row: Row, actor: str = "app") -> LogEvent:
        t = self.table(table)
        key = t.check_key(key)
        if list(row) != t.schema:
            raise SchemaError(f"{table}: row columns {list(row)} do not match schema {t.schema}")
        if t.key_of(row) != key:
            raise SchemaError(f"{table}: key {key!r} does not match row {row!r}")
        row = dict(row)
        with self._lock:
            self.locks[(actor, table)] += 1
            chain = t.chains.get(key)
            if chain is None:
                chain = t.chains[key] = []
                bisect.insort(t.sorted_keys, key)
            version = chain[-1][2] + 1 if chain else 1
            op = "update" if key in t.live else "create"
            e = self._append(table, op, key, row, version)
            chain.append((e.lsn, row, version))
            t.live[key] = (row, version)
        return e

    def delete(self, table: str, key: Key, actor: str = "app") -> LogEvent:
        t = self.table(table)
        key = make_key(key)
        with self._lock:
            if key not in t.live:
                raise MissingRowError(f"{table}: no row with key {key!r}")
            self.locks[(actor, table)] += 1
            chain = t.chains[key]
            version = chain[-1][2] + 1
            e = self._append(table, "delete", key, None, version)
            chain.append((e.lsn, None, version))
            del t.live[key]
        return e

    def update_watermark(self, value: uuid.UUID, actor: str = "engine") -> LogEvent:
        with self._lock:
            self.locks[(actor, WATERMARK_TABLE)] += 1
            self.watermark_row = value
            self._watermark_version += 1
            return self._append(
                WATERMARK_TABLE,
                "update",
                WATERMARK_KEY,
                {"id": 1, "value": str(value)},
                self._watermark_version,
                is_watermark=True,
                watermark_value=value,
            )

    def _check_as_of(self, as_of: Optional[int]) -> int:
        head = self.head_lsn
        if as_of is None:
            return head
        if as_of > head:
            raise ReadBeyondHeadError(f"as_of {as_of} is beyond log head {head}")
        return as_of

    def snapshot_select_range(self, table: str, after: Optional[Key], limit: int,
                              as_of: Optional[int] = None) -> list:
        """Rows with key > ``after`` as of LSN ``as_of``, ascending, at most ``limit``."""
        if limit < 1:
            raise ValueError("limit must be positive")
        t = self.table(table)
        with self._lock:
            as_of = self._check_as_of(as_of)
            keys = t.sorted_keys
            i = 0 if after is None else bisect.bisect_right(keys, tuple(after))
            out = []
            while i < len(keys) and len(out) < limit:
                entry = t.version_as_of(keys[i], as_of)
                if entry is not None:
                    out.append((keys[i], dict(entry[1]), entry[2]))
                i += 1
        return out

    def select_keys(self, table: str, keys: Iterable[Key], as_of: Optional[int] = None) -> list:
        """Exact-key lookup as of ``as_of``; absent keys are omitted."""
        t = self.table(table)
        with self._lock:
            as_of = self._check_as_of(as_of)
            out = []
            for key in sorted(tuple(k) for k in keys):
                entry = t.version_as_of(key, as_of)
                if entry is not None:
                    out.append((key, dict(entry[1]), entry[2]))
        return out

    def subscribe_log(self, start: int) -> LogCursor:
        """Cursor yielding every committed event with LSN > ``start``."""
        if start < self._floor:
            raise RetentionError(f"position {start} is below the retention floor {self._floor}")
        if start > self.head_lsn + 1:
            raise ValueError(f"position {start} is beyond the log head {self.head_lsn}")
        return LogCursor(self, start)

    def _read_log(self, lsn: int) -> Optional[LogEvent]:
        with self._lock:
            i = lsn - 1 - self._floor
            if i < 0:
                raise RetentionError(f"lsn {lsn} has been truncated")
            if i >= len(self.log):
                return None
            return self.log[i]

    def current_state(self, table: str) -> dict:
        t = self.table(table)
        with self._lock:
            return {k: (dict(row), v) for k, (row, v) in t.live.items()}

    def engine_lock_count(self) -> int:
        """Locks taken by non-application actors on application tables."""
        return sum(n for (actor, table), n in self.locks.items()
                   if actor != "app" and table != WATERMARK_TABLE)
