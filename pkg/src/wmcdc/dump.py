"""Dump API: request, pause, resume and progress checkpoints.

One dump runs at a time.  Tables are dumped one after another in name order,
one chunk window at a time.  After a chunk's rows have been delivered, the
chunk's last key is written to the state store; a restarted or successor
process continues from there, so only an in-flight chunk is ever repeated.

Control calls (:meth:`DumpCoordinator.pause_dump` and friends) may come from
any thread.  They are queued and applied by :meth:`DumpCoordinator.step`,
which runs in the engine's context, so they take effect between windows.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import uuid
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Optional

from .coordination import FencedWriteError, StateStore, StoreUnavailableError
from .engine import ChunkOutcome, WindowTrace
from .model import Key, make_key

logger = logging.getLogger(__name__)

STATUSES = ("pending", "running", "paused", "complete")


class DumpError(RuntimeError):
    pass


class DumpConflictError(DumpError):
    pass


class UnknownDumpError(DumpError, KeyError):
    pass


class DumpStateError(DumpError):
    pass


@dataclass(frozen=True)
class Scope:
    kind: str  # all | table | keys
    table: Optional[str] = None
    keys: tuple = ()

    @classmethod
    def all_tables(cls) -> "Scope":
        return cls("all")

    @classmethod
    def one_table(cls, name: str) -> "Scope":
        return cls("table", name)

    @classmethod
    def key_list(cls, name: str, keys) -> "Scope":
        return cls("keys", name, tuple(make_key(k) for k in keys))

    @classmethod
    def parse(cls, text: str) -> "Scope":
        """``all``, ``table:<name>`` or ``keys:<name>:<k>,<k>,...`` (integer keys)."""
        if text == "all":
            return cls.all_tables()
        kind, _, rest = text.partition(":")
        if kind == "table" and rest:
            return cls.one_table(rest)
        if kind == "keys":
            name, _, ks = rest.partition(":")
            if name and ks:
                return cls.key_list(name, [(_parse_key_part(k),) for k in ks.split(",")])
        raise ValueError(f"bad scope {text!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "table": self.table, "keys": [list(k) for k in self.keys]}

    @classmethod
    def from_json(cls, obj: dict) -> "Scope":
        return cls(obj["kind"], obj.get("table"), tuple(tuple(k) for k in obj.get("keys", ())))


def _parse_key_part(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


@dataclass
class DumpRequest:
    scope: Scope
    chunk_size: int = 1000
    throttle: int = 0
    dump_id: str = ""

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        if self.throttle < 0:
            raise ValueError("throttle must be non-negative")
        if self.scope.kind == "keys":
            if not self.scope.keys:
                raise ValueError("keys scope needs at least one key")
            if len(set(self.scope.keys)) != len(self.scope.keys):
                raise ValueError("keys scope lists a key twice")


@dataclass
class DumpCheckpoint:
    dump_id: str
    table: str
    last_key: Optional[Key] = None
    status: str = "pending"

    def to_record(self) -> bytes:
        rec = {"dump_id": self.dump_id, "table": self.table,
               "last_key": None if self.last_key is None else list(self.last_key),
               "status": self.status}
        return json.dumps(rec, separators=(",", ":")).encode()

    @classmethod
    def from_record(cls, data: bytes) -> "DumpCheckpoint":
        rec = json.loads(data)
        last = rec["last_key"]
        return cls(rec["dump_id"], rec["table"], None if last is None else tuple(last), rec["status"])


@dataclass
class _Dump:
    request: DumpRequest
    tables: list
    checkpoints: dict  # table -> DumpCheckpoint
    state: str = "running"  # running | paused | complete
    halted: Optional[str] = None

    def record(self) -> bytes:
        r = self.request
        return json.dumps({"dump_id": r.dump_id, "scope": r.scope.to_json(), "chunk_size": r.chunk_size,
                           "throttle": r.throttle, "tables": self.tables, "state": self.state},
                          separators=(",", ":")).encode()

    def current_table(self) -> Optional[str]:
        for t in self.tables:
            if self.checkpoints[t].status != "complete":
                return t
        return None


def checkpoint_path(dump_id: str, table: str) -> str:
    return f"checkpoints/{dump_id}/{table}"


def dump_path(dump_id: str) -> str:
    return f"dumps/{dump_id}"


class DumpCoordinator:
    def __init__(self, store: StateStore, db, epoch: Optional[int] = None,
                 uuid_factory=uuid.uuid4):
        self.store = store
        self.db = db
        self.epoch = epoch
        self.uuid_factory = uuid_factory
        self.dumps: dict[str, _Dump] = {}
        self.mailbox: "queue.Queue[tuple]" = queue.Queue()
        self._lock = threading.RLock()
        self._inflight: Optional[str] = None  # dump id with a window open
        self._pending: Optional[tuple] = None  # (dump_id, outcome, trace) awaiting delivery
        self._started_any = False
        self.chunks_started = 0
        self.checkpoints_written = 0
        self.listeners: list = []  # called as fn(event_name, dump_id, table, outcome)

    # -- API, callable from any thread --

    def request_dump(self, r: DumpRequest) -> str:
        with self._lock:
            if any(d.state != "complete" for d in self.dumps.values()):
                raise DumpConflictError("another dump is still in progress")
            if r.scope.kind == "all":
                tables = sorted(self.db.tables)
                if not tables:
                    raise DumpError("no tables to dump")
            else:
                t = self.db.table(r.scope.table)
                if r.scope.kind == "keys":
                    for k in r.scope.keys:
                        if len(k) != len(t.pk_columns):
                            raise ValueError(f"key {k!r} does not match the primary key of {t.name}")
                tables = [r.scope.table]
            if not r.dump_id:
                r.dump_id = str(self.uuid_factory())
            d = _Dump(r, tables, {t: DumpCheckpoint(r.dump_id, t) for t in tables})
            self.dumps[r.dump_id] = d
            self._persist_dump(d)
            for cp in d.checkpoints.values():
                self._persist_checkpoint(cp)
            return r.dump_id

    def pause_dump(self, dump_id: str) -> Future:
        return self._enqueue("pause", dump_id)

    def resume_dump(self, dump_id: str) -> Future:
        return self._enqueue("resume", dump_id)

    def dump_status(self, dump_id: str) -> dict:
        with self._lock:
            d = self._get(dump_id)
            return {
                "dump_id": dump_id,
                "state": d.state,
                "halted": d.halted,
                "tables": {t: DumpCheckpoint(cp.dump_id, cp.table, cp.last_key, cp.status)
                           for t, cp in d.checkpoints.items()},
            }

    @property
    def active_dump(self) -> Optional[str]:
        with self._lock:
            for dump_id, d in self.dumps.items():
                if d.state != "complete":
                    return dump_id
            return None

    def complete(self, dump_id: Optional[str] = None) -> bool:
        with self._lock:
            if dump_id is None:
                return all(d.state == "complete" for d in self.dumps.values())
            return self._get(dump_id).state == "complete"

    def _get(self, dump_id: str) -> _Dump:
        try:
            return self.dumps[dump_id]
        except KeyError:
            raise UnknownDumpError(dump_id) from None

    def _enqueue(self, verb: str, dump_id: str) -> Future:
        with self._lock:
            d = self._get(dump_id)
            want = "running" if verb == "pause" else "paused"
            if d.state != want:
                raise DumpStateError(f"cannot {verb} dump {dump_id} in state {d.state}")
        fut: Future = Future()
        self.mailbox.put((verb, dump_id, fut))
        return fut

    # -- engine context --

    def _apply_mailbox(self):
        while True:
            try:
                verb, dump_id, fut = self.mailbox.get_nowait()
            except queue.Empty:
                return
            try:
                with self._lock:
                    d = self._get(dump_id)
                    if verb == "pause" and d.state == "running":
                        d.state = "paused"
                        self._set_table_status(d, "running", "paused")
                    elif verb == "resume" and d.state == "paused":
                        d.state = "running"
                        self._set_table_status(d, "paused", "running")
                    else:
                        raise DumpStateError(f"cannot {verb} dump {dump_id} in state {d.state}")
                    self._persist_dump(d)
                fut.set_result(self.dump_status(dump_id))
            except Exception as exc:  # reported to the caller through the future
                fut.set_exception(exc)

    def _set_table_status(self, d: _Dump, old: str, new: str):
        for cp in d.checkpoints.values():
            if cp.status == old:
                cp.status = new
                self._persist_checkpoint(cp)

    def window_closed(self, outcome: ChunkOutcome, trace: WindowTrace):
        """Engine callback; the checkpoint waits until the chunk is delivered."""
        with self._lock:
            self._pending = (self._inflight, outcome, trace)
            self._inflight = None
        self._notify("closed", self._pending[0], outcome.table, outcome)

    def step(self, engine, delivered_seq: int) -> Optional[str]:
        """Apply control commands, commit delivered chunks and start the next chunk.

        Returns ``"checkpoint"``, ``"chunk"``, ``"complete"`` or None.
        """
        self._apply_mailbox()
        with self._lock:
            if self._pending is not None:
                dump_id, outcome, trace = self._pending
                if delivered_seq < outcome.upto_seq:
                    return None
                self._pending = None
                d = self.dumps[dump_id]
                if d.halted:
                    return None
                cp = d.checkpoints[outcome.table]
                if outcome.exhausted:
                    cp.status = "complete"
                else:
                    cp.last_key = outcome.last_key
                try:
                    self._persist_checkpoint(cp)
                except (StoreUnavailableError, FencedWriteError) as exc:
                    d.halted = str(exc)
                    logger.error("dump %s halted: %s", dump_id, exc)
                    return None
                trace.checkpointed = True
                self.checkpoints_written += 1
                self._notify("checkpoint", dump_id, outcome.table, outcome)
                self._maybe_finish(d)
                return "checkpoint"

            if self._inflight is not None or engine.busy:
                return None
            dump_id = self.active_dump
            if dump_id is None:
                return None
            d = self.dumps[dump_id]
            if d.state != "running" or d.halted:
                return None
            if self._started_any and engine.log_steps_since_close < d.request.throttle:
                return None
            try:
                return self._start_chunk(engine, d)
            except (StoreUnavailableError, FencedWriteError) as exc:
                d.halted = str(exc)
                logger.error("dump %s halted: %s", dump_id, exc)
                return None

    def schedule_next_chunk(self, engine, delivered_seq: int) -> Optional[str]:
        return self.step(engine, delivered_seq)

    def _start_chunk(self, engine, d: _Dump) -> Optional[str]:
        table = d.current_table()
        if table is None:
            self._maybe_finish(d)
            return "complete"
        cp = d.checkpoints[table]
        r = d.request
        keys = None
        if r.scope.kind == "keys":
            remaining = [k for k in sorted(r.scope.keys) if cp.last_key is None or k > cp.last_key]
            if not remaining:
                cp.status = "complete"
                self._persist_checkpoint(cp)
                self._maybe_finish(d)
                return "complete"
            keys = remaining[:r.chunk_size]
        if cp.status != "running":
            cp.status = "running"
            self._persist_checkpoint(cp)
        engine.begin_chunk(table, cp.last_key, r.chunk_size, keys, tag=r.dump_id)
        self._inflight = r.dump_id
        self._started_any = True
        self.chunks_started += 1
        self._notify("started", r.dump_id, table, None)
        return "chunk"

    def _maybe_finish(self, d: _Dump):
        if d.state != "complete" and all(cp.status == "complete" for cp in d.checkpoints.values()):
            d.state = "complete"
            self._persist_dump(d)
            self._notify("complete", d.request.dump_id, None, None)

    def _notify(self, name, dump_id, table, outcome):
        for fn in self.listeners:
            fn(name, dump_id, table, outcome)

    def _persist_checkpoint(self, cp: DumpCheckpoint):
        self.store.put_state(checkpoint_path(cp.dump_id, cp.table), cp.to_record(), epoch=self.epoch)

    def _persist_dump(self, d: _Dump):
        self.store.put_state(dump_path(d.request.dump_id), d.record(), epoch=self.epoch)

    # -- restart --

    def recover(self):
        """Reload every dump and checkpoint from the state store."""
        with self._lock:
            for path in self.store.paths("dumps/"):
                rec = json.loads(self.store.get_state(path, "linearizable"))
                r = DumpRequest(Scope.from_json(rec["scope"]), rec["chunk_size"], rec["throttle"],
                                rec["dump_id"])
                tables = rec["tables"]
                cps = {}
                for t in tables:
                    raw = self.store.get_state(checkpoint_path(r.dump_id, t), "linearizable")
                    cps[t] = DumpCheckpoint.from_record(raw) if raw else DumpCheckpoint(r.dump_id, t)
                self.dumps[r.dump_id] = _Dump(r, tables, cps, rec["state"])
