"""Log capture plumbing: output buffer, delivery loop and pause accounting.

The engine appends to an :class:`OutputBuffer`; a :class:`Deliverer` drains it
into a sink in sequence order.  In threaded use the deliverer runs in its own
thread via :meth:`Deliverer.run`; the deterministic harness calls
:meth:`Deliverer.step` instead.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .model import LogEvent, OutputEvent

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 65536


class ContractViolation(RuntimeError):
    pass


class BufferClosedError(RuntimeError):
    pass


class BufferFullError(RuntimeError):
    pass


class DeliveryError(RuntimeError):
    """The sink kept failing; the engine must halt."""


class TransientSinkError(IOError):
    """A sink failure worth retrying."""


def to_output_event(e: LogEvent, seq: int) -> OutputEvent:
    if e.is_watermark:
        raise ContractViolation(f"watermark event at lsn {e.lsn} must not be output")
    return OutputEvent(seq, e.table, e.op, e.key, e.row, "log", e.lsn, e.version)


class OutputBuffer:
    """Bounded FIFO of output events; assigns ``seq`` at append time."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, start_seq: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.next_seq = start_seq
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self):
        return len(self._queue)

    @property
    def last_seq(self) -> int:
        return self.next_seq - 1

    def free(self) -> int:
        return self.capacity - len(self._queue)

    def append(self, e: OutputEvent, timeout: Optional[float] = None) -> int:
        """Enqueue ``e`` restamped with the next seq; waits while the buffer is full."""
        with self._cond:
            if self._closed:
                raise BufferClosedError("buffer closed")
            if len(self._queue) >= self.capacity:
                if not self._cond.wait_for(
                        lambda: self._closed or len(self._queue) < self.capacity, timeout):
                    raise BufferFullError(f"buffer full ({self.capacity} events)")
                if self._closed:
                    raise BufferClosedError("buffer closed")
            seq = self.next_seq
            if e.seq != seq:
                e = replace(e, seq=seq)
            self._queue.append(e)
            self.next_seq += 1
            self._cond.notify_all()
            return seq

    def append_log(self, e: LogEvent) -> int:
        return self.append(to_output_event(e, self.next_seq))

    def peek(self, timeout: Optional[float] = 0) -> Optional[OutputEvent]:
        with self._cond:
            if not self._queue and timeout != 0:
                self._cond.wait_for(lambda: self._queue or self._closed, timeout)
            return self._queue[0] if self._queue else None

    def pop(self) -> OutputEvent:
        with self._cond:
            e = self._queue.popleft()
            self._cond.notify_all()
            return e

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


class Deliverer:
    """Moves events from the buffer to the sink, in order, exactly once.

    A failed write is retried ``retries`` times with doubling backoff before
    :class:`DeliveryError` is raised.  The head event is only popped after the
    sink accepted it, so retries never reorder.

    ``on_delivered`` is called after each accepted event (used for log
    position persistence).
    """

    def __init__(self, buf: OutputBuffer, sink, retries: int = 3, backoff: float = 0.01,
                 sleep: Callable[[float], None] = time.sleep,
                 on_delivered: Optional[Callable[[OutputEvent], None]] = None):
        self.buf = buf
        self.sink = sink
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self.on_delivered = on_delivered
        self.delivered_seq = buf.last_seq
        self.delivered = 0
        self.failures = 0
        self.error: Optional[BaseException] = None

    def _write(self, e: OutputEvent):
        delay = self.backoff
        for attempt in range(self.retries + 1):
            try:
                self.sink.write(e)
                return
            except (TransientSinkError, OSError) as exc:
                self.failures += 1
                if attempt == self.retries:
                    raise DeliveryError(f"sink failed for seq {e.seq}: {exc}") from exc
                logger.debug("retrying seq %d after %s", e.seq, exc)
                if delay:
                    self.sleep(delay)
                delay *= 2

    def step(self) -> bool:
        """Deliver at most one event; returns whether one was delivered."""
        e = self.buf.peek()
        if e is None:
            return False
        self._write(e)
        self.buf.pop()
        self.delivered_seq = e.seq
        self.delivered += 1
        if self.on_delivered is not None:
            self.on_delivered(e)
        return True

    def run(self, poll: float = 0.05):
        """Drain until the buffer is closed and empty."""
        try:
            while True:
                e = self.buf.peek(timeout=poll)
                if e is None:
                    if self.buf.closed:
                        return
                    continue
                self.step()
        except BaseException as exc:
            self.error = exc
            logger.error("delivery halted: %s", exc)
            raise


@dataclass
class CaptureState:
    """Log consumption state plus accounting of pause episodes (in engine steps)."""

    cursor: object
    paused: bool = False
    events_consumed: int = 0
    pause_episodes: list = field(default_factory=list)
    _pause_start: Optional[tuple] = None

    def pause(self, step: int):
        if self.paused:
            raise ContractViolation("log processing already paused")
        self.paused = True
        self._pause_start = (step, self.events_consumed)

    def resume(self, step: int):
        if not self.paused:
            raise ContractViolation("log processing is not paused")
        start, consumed = self._pause_start
        self.pause_episodes.append(PauseEpisode(start, step, self.events_consumed - consumed))
        self.paused = False
        self._pause_start = None

    def next_event(self) -> Optional[LogEvent]:
        if self.paused:
            raise ContractViolation("log processing is paused")
        e = self.cursor.next()
        if e is not None:
            self.events_consumed += 1
        return e


@dataclass(frozen=True)
class PauseEpisode:
    start: int
    end: int
    consumed: int  # log events consumed while paused; always 0

    @property
    def length(self) -> int:
        return self.end - self.start


pause_log_processing = CaptureState.pause
resume_log_processing = CaptureState.resume
