"""Watermark-windowed chunk selection interleaved with log capture.

A chunk is selected between two watermark writes while log consumption is
paused:

1. pause log processing
2. write a fresh low watermark ``lw`` to the watermark table
3. select the next chunk (at a log position no earlier than ``lw``)
4. write a fresh high watermark ``hw``
5. resume log processing

Consumption then continues event by event.  Between ``lw`` and ``hw`` any log
event whose key is held in the chunk evicts that row from the chunk, because
the log event is at least as new as the selected row.  When ``hw`` arrives
the surviving rows are appended to the output as dump rows, in ascending key
order, and normal processing continues.

:class:`Engine` exposes this as a state machine: each :meth:`Engine.step`
does one bounded piece of work (one watermark write, one select, or one log
event), which lets a scheduler interleave source writes between steps 2, 3
and 4.
"""

from __future__ import annotations

import logging
import random
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from .capture import CaptureState, OutputBuffer
from .model import Key, LogEvent, OutputEvent, WatermarkPair
from .source import SimDatabase

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 1000


class ProtocolViolation(RuntimeError):
    pass


class WindowBusyError(RuntimeError):
    pass


@dataclass
class ChunkBuffer:
    table: str
    rows: dict  # key -> (row, version), ascending key order
    last_key: Optional[Key]
    selected_count: int


@dataclass
class WindowTrace:
    """Instrumentation for one window, used by the verifiers."""

    index: int
    instance: str
    table: str
    after: Optional[Key]
    lw: uuid.UUID
    hw: uuid.UUID
    lw_lsn: Optional[int] = None
    hw_lsn: Optional[int] = None
    as_of: Optional[int] = None
    selected: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    emitted: list = field(default_factory=list)  # (key, seq, version)
    last_key: Optional[Key] = None
    tag: Optional[str] = None
    closed: bool = False
    checkpointed: bool = False


@dataclass
class EngineWindowState:
    pair: WatermarkPair
    chunk: ChunkBuffer
    inwindow: bool = False
    trace: Optional[WindowTrace] = None


@dataclass(frozen=True)
class ChunkOutcome:
    table: str
    last_key: Optional[Key]
    exhausted: bool
    selected: int = 0
    emitted: int = 0
    upto_seq: int = 0  # seq of the last event appended when the window closed


def process_event(state: Optional[EngineWindowState], e: LogEvent, buf: OutputBuffer):
    """Feed one log event through the window logic.

    Returns ``(state, closed)``; ``closed`` is true when ``e`` was the high
    watermark of ``state`` and the remaining chunk rows were appended.
    """
    if state is None:
        if not e.is_watermark:
            buf.append_log(e)
        return state, False

    if not state.inwindow:
        if not e.is_watermark:
            buf.append_log(e)
        elif e.watermark_value == state.pair.lw:
            state.inwindow = True
            if state.trace:
                state.trace.lw_lsn = e.lsn
        elif e.watermark_value == state.pair.hw:
            raise ProtocolViolation(f"high watermark at lsn {e.lsn} seen before the low watermark")
        # any other watermark belongs to an abandoned window and is ignored
        return state, False

    if not e.is_watermark:
        chunk = state.chunk
        # deletes evict too: the log event supersedes the selected row
        if e.table == chunk.table and e.key in chunk.rows:
            del chunk.rows[e.key]
            if state.trace:
                state.trace.removed.append(e.key)
        buf.append_log(e)
        return state, False

    if e.watermark_value != state.pair.hw:
        return state, False

    chunk = state.chunk
    for key in sorted(chunk.rows):
        row, version = chunk.rows[key]
        seq = buf.append(OutputEvent(buf.next_seq, chunk.table, "update", key, row, "dump", None, version))
        if state.trace:
            state.trace.emitted.append((key, seq, version))
    if state.trace:
        state.trace.hw_lsn = e.lsn
        state.trace.closed = True
    return state, True


class Engine:
    """Single-threaded capture engine for one source log.

    ``start_lsn`` is the exclusive cursor start.  Non-watermark events with
    LSN <= ``skip_through`` are consumed without being output; a successor
    uses this to avoid re-sending events the sink already holds.

    With ``read_lag_rng`` set, each chunk select reads at a position drawn
    uniformly between the low watermark and the log head at select time,
    instead of exactly at the low watermark.
    """

    def __init__(self, db: SimDatabase, buf: OutputBuffer, start_lsn: Optional[int] = None, *,
                 instance_id: str = "engine", skip_through: int = 0,
                 uuid_factory: Callable[[], uuid.UUID] = uuid.uuid4,
                 read_lag_rng: Optional[random.Random] = None,
                 traces: Optional[list] = None,
                 on_window_closed: Optional[Callable[[ChunkOutcome, WindowTrace], None]] = None):
        self.db = db
        self.buf = buf
        self.start_lsn = db.head_lsn if start_lsn is None else start_lsn
        self.capture = CaptureState(db.subscribe_log(self.start_lsn))
        self.instance_id = instance_id
        self.skip_through = skip_through
        self.uuid_factory = uuid_factory
        self.read_lag_rng = read_lag_rng
        self.traces = traces if traces is not None else []
        self.on_window_closed = on_window_closed

        self.window: Optional[EngineWindowState] = None
        self.phase = "log"  # log -> select -> high -> log
        self._request = None
        self._pair: Optional[WatermarkPair] = None
        self._lw_lsn = 0
        self._chunk: Optional[ChunkBuffer] = None

        self.steps = 0
        self.log_steps_since_close = 0
        self.windows_closed = 0
        self.suppressed = 0
        self.last_outcome: Optional[ChunkOutcome] = None

    @property
    def busy(self) -> bool:
        """A chunk has been requested and its window has not closed yet."""
        return self._request is not None or self.window is not None

    @property
    def at_head(self) -> bool:
        return self.phase == "log" and self.capture.cursor.at_head()

    def room_needed(self) -> int:
        """Buffer slots the next step may append."""
        if self.window is not None:
            return len(self.window.chunk.rows) + 1
        return 1

    def begin_chunk(self, table: str, after: Optional[Key], chunk_size: int = DEFAULT_CHUNK_SIZE,
                    keys: Optional[list] = None, tag: Optional[str] = None):
        """Request a window over ``table``; the next steps perform steps 1-5.

        With ``keys`` the chunk is an exact-key lookup of that batch instead
        of a range scan after ``after``.  ``tag`` is copied into the window
        trace.
        """
        if self.busy:
            raise WindowBusyError("a chunk window is already in flight")
        if chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        self.db.table(table)
        self._request = (table, None if after is None else tuple(after), chunk_size,
                         None if keys is None else [tuple(k) for k in keys])
        self._tag = tag

    def step(self) -> str:
        """Do one bounded unit of work and name it.

        Returns one of ``"lw"``, ``"select"``, ``"hw"``, ``"event"``,
        ``"watermark"`` or ``"idle"``.
        """
        if self.phase == "log" and self._request is not None and self.window is None:
            return self._write_low()
        if self.phase == "select":
            return self._select()
        if self.phase == "high":
            return self._write_high()
        return self._consume()

    def _new_pair(self) -> WatermarkPair:
        lw = self.uuid_factory()
        hw = self.uuid_factory()
        while hw == lw:
            hw = self.uuid_factory()
        return WatermarkPair(lw, hw)

    def _write_low(self) -> str:
        self.capture.pause(self.steps)
        self._pair = self._new_pair()
        self._lw_lsn = self.db.update_watermark(self._pair.lw, actor=self.instance_id).lsn
        self.steps += 1
        self.phase = "select"
        return "lw"

    def _select(self) -> str:
        table, after, size, keys = self._request
        as_of = self._lw_lsn
        if self.read_lag_rng is not None:
            as_of = self.read_lag_rng.randint(self._lw_lsn, self.db.head_lsn)
        try:
            if keys is None:
                rows = self.db.snapshot_select_range(table, after, size, as_of)
                last = rows[-1][0] if rows else None
            else:
                rows = self.db.select_keys(table, keys, as_of)
                last = keys[-1] if keys else after
        except Exception:
            # the low watermark stays in the log unmatched, which is harmless
            self._abandon()
            raise
        self._chunk = ChunkBuffer(table, {k: (row, v) for k, row, v in rows}, last, len(rows))
        self._as_of = as_of
        self.steps += 1
        self.phase = "high"
        return "select"

    def _abandon(self):
        self.phase = "log"
        self._request = None
        self._chunk = None
        self.steps += 1
        self.capture.resume(self.steps)

    def _write_high(self) -> str:
        table, after, _, _ = self._request
        pair = self._pair
        self.db.update_watermark(pair.hw, actor=self.instance_id)
        self.steps += 1
        self.capture.resume(self.steps)
        trace = WindowTrace(len(self.traces), self.instance_id, table, after, pair.lw, pair.hw,
                            as_of=self._as_of, selected=list(self._chunk.rows),
                            last_key=self._chunk.last_key, tag=self._tag)
        self.traces.append(trace)
        self.window = EngineWindowState(pair, self._chunk, trace=trace)
        self.phase = "log"
        return "hw"

    def _consume(self) -> str:
        self.steps += 1
        self.log_steps_since_close += 1
        e = self.capture.next_event()
        if e is None:
            return "idle"
        if e.lsn <= self.skip_through and not e.is_watermark:
            self.suppressed += 1
            return "event"
        self.window, closed = process_event(self.window, e, self.buf)
        if closed:
            self._close()
        return "watermark" if e.is_watermark else "event"

    def _close(self):
        window = self.window
        chunk = window.chunk
        table, _, _, keys = self._request
        exhausted = keys is None and chunk.selected_count == 0
        outcome = ChunkOutcome(table, chunk.last_key, exhausted, chunk.selected_count,
                               len(window.trace.emitted), self.buf.last_seq)
        self.window = None
        self._request = None
        self._chunk = None
        self.windows_closed += 1
        self.log_steps_since_close = 0
        self.last_outcome = outcome
        if self.on_window_closed is not None:
            self.on_window_closed(outcome, window.trace)

    # synchronous helpers for callers that drive the engine directly

    def open_window(self, table: str, after: Optional[Key], chunk_size: int = DEFAULT_CHUNK_SIZE,
                    keys: Optional[list] = None) -> EngineWindowState:
        """Steps 1-5 in one call; returns the window with the chunk in memory."""
        self.begin_chunk(table, after, chunk_size, keys)
        for _ in range(3):
            self.step()
        return self.window

    def run_chunk(self, table: str, after: Optional[Key], chunk_size: int = DEFAULT_CHUNK_SIZE,
                  keys: Optional[list] = None) -> ChunkOutcome:
        """Open a window and consume the log until it closes."""
        self.open_window(table, after, chunk_size, keys)
        while self.window is not None:
            if self.step() == "idle":
                raise ProtocolViolation("log ended before the high watermark arrived")
        return self.last_outcome

    def drain(self) -> int:
        """Consume the log up to its current head; returns events consumed."""
        n = 0
        while self.step() != "idle":
            n += 1
        return n
