"""Output destinations.

Every sink accepts events strictly in seq order (``seq == last + 1``) and
rejects anything else, which turns reordering or duplication bugs in the
delivery path into hard errors.  Sinks also remember the highest log LSN they
accepted so a successor engine can tell which log events already went out.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Optional

from .capture import TransientSinkError
from .model import OutputEvent, decode_output_event, encode_output_event


class SequenceError(RuntimeError):
    pass


class Sink:
    kind = "abstract"

    def __init__(self):
        self.last_seq = 0
        self.last_log_lsn = 0
        self.accepted = 0

    @property
    def next_seq(self) -> int:
        return self.last_seq + 1

    def _check(self, e: OutputEvent):
        if e.seq != self.last_seq + 1:
            raise SequenceError(f"{self.kind} sink expected seq {self.last_seq + 1}, got {e.seq}")

    def _accepted(self, e: OutputEvent):
        self.last_seq = e.seq
        if e.lsn is not None:
            self.last_log_lsn = max(self.last_log_lsn, e.lsn)
        self.accepted += 1

    def write(self, e: OutputEvent):
        raise NotImplementedError

    def close(self):
        pass


class MemorySink(Sink):
    kind = "memory"

    def __init__(self):
        super().__init__()
        self.events: list[OutputEvent] = []

    def write(self, e: OutputEvent):
        self._check(e)
        self.events.append(e)
        self._accepted(e)


class FileSink(Sink):
    """Appends canonical lines to a file; reopening resumes after the last line."""

    kind = "file"

    def __init__(self, path, fsync: bool = False):
        super().__init__()
        self.path = Path(path)
        self.fsync = fsync
        if self.path.exists():
            for e in read_events(self.path):
                self._accepted(e)
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def write(self, e: OutputEvent):
        self._check(e)
        line = encode_output_event(e) + "\n"
        self._fh.write(line)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        self._accepted(e)

    def close(self):
        self._fh.close()


def read_events(path) -> list[OutputEvent]:
    with open(path, encoding="utf-8") as fh:
        return [decode_output_event(line) for line in fh if line.strip()]


def write_events(path, events: Iterable[OutputEvent]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(encode_output_event(e) + "\n")


def materialize(events: Iterable[OutputEvent], state: Optional[dict] = None) -> dict:
    """Apply events in order: upsert on create/update, remove on delete.

    Returns ``{(table, key): (row, version)}``.
    """
    state = {} if state is None else state
    for e in events:
        k = (e.table, e.key)
        if e.op == "delete":
            state.pop(k, None)
        else:
            state[k] = (e.row, e.version)
    return state


class CompactedTopic(Sink):
    """A keyed, log-compacted topic keyed by ``(table, primary key)``."""

    kind = "compacted-topic"

    def __init__(self):
        super().__init__()
        self.entries: list[OutputEvent] = []

    def write(self, e: OutputEvent):
        self._check(e)
        self.entries.append(e)
        self._accepted(e)

    def compact(self) -> dict:
        """Latest entry per key; keys whose latest entry is a delete are dropped."""
        return compact(self.entries)

    def bootstrap_read(self) -> tuple[dict, "TopicCursor"]:
        return bootstrap_read(self)


def compact(entries: Iterable[OutputEvent]) -> dict:
    latest: dict = {}
    for e in entries:
        k = (e.table, e.key)
        latest.pop(k, None)  # re-insert so the view is ordered by last write
        latest[k] = e
    return {k: e for k, e in latest.items() if e.op != "delete"}


class TopicCursor:
    def __init__(self, topic: CompactedTopic, position: int):
        self.topic = topic
        self.position = position

    def next(self) -> Optional[OutputEvent]:
        if self.position >= len(self.topic.entries):
            return None
        e = self.topic.entries[self.position]
        self.position += 1
        return e

    def __iter__(self):
        while (e := self.next()) is not None:
            yield e


def bootstrap_read(topic: CompactedTopic) -> tuple[dict, TopicCursor]:
    """Compacted state up to now plus a cursor over everything appended later.

    The state maps ``(table, key)`` to ``(row, version)`` so a consumer can
    keep applying tail events with :func:`materialize`.
    """
    point = len(topic.entries)
    view = compact(topic.entries[:point])
    state = {k: (e.row, e.version) for k, e in view.items()}
    return state, TopicCursor(topic, point)


class FlakySink(Sink):
    """Wraps a sink and fails chosen seqs a set number of times before passing them on."""

    def __init__(self, inner: Sink, failures: dict[int, int]):
        self.inner = inner
        self.kind = inner.kind
        self.remaining = dict(failures)
        self.injected = 0

    last_seq = property(lambda self: self.inner.last_seq)
    last_log_lsn = property(lambda self: self.inner.last_log_lsn)
    accepted = property(lambda self: self.inner.accepted)

    def write(self, e: OutputEvent):
        left = self.remaining.get(e.seq, 0)
        if left:
            self.remaining[e.seq] = left - 1
            self.injected += 1
            raise TransientSinkError(f"injected failure for seq {e.seq}")
        self.inner.write(e)

    def close(self):
        self.inner.close()
