"""One capture process bound to a leadership lease.

A node is passive until :meth:`Node.try_activate` wins the lease.  On
activation it resumes the log from the persisted position, skips log events
the sink already holds, reloads dump checkpoints, and starts numbering output
after the sink's last seq.  Only the active node consumes the log.
"""

from __future__ import annotations

import logging
import random
import threading
import time
import uuid
from typing import Callable, Optional

from .capture import DEFAULT_CAPACITY, Deliverer, OutputBuffer
from .coordination import LOGPOS_PATH, LeaseExpiredError, StateStore
from .dump import DumpCoordinator
from .engine import Engine
from .source import SimDatabase

logger = logging.getLogger(__name__)

DEFAULT_LOGPOS_INTERVAL = 100


class Node:
    def __init__(self, instance_id: str, db: SimDatabase, store: StateStore, sink, *,
                 lease_duration: float = 10.0,
                 logpos_interval: int = DEFAULT_LOGPOS_INTERVAL,
                 buffer_capacity: int = DEFAULT_CAPACITY,
                 uuid_factory: Callable[[], uuid.UUID] = uuid.uuid4,
                 read_lag_rng: Optional[random.Random] = None,
                 traces: Optional[list] = None,
                 retry_backoff: float = 0.0,
                 initial_lsn: Optional[int] = None):
        self.instance_id = instance_id
        self.db = db
        self.store = store
        self.sink = sink
        self.lease_duration = lease_duration
        self.logpos_interval = logpos_interval
        self.buffer_capacity = buffer_capacity
        self.uuid_factory = uuid_factory
        self.read_lag_rng = read_lag_rng
        self.traces = traces if traces is not None else []
        self.retry_backoff = retry_backoff
        self.initial_lsn = initial_lsn

        self.lease = None
        self.engine: Optional[Engine] = None
        self.buf: Optional[OutputBuffer] = None
        self.deliverer: Optional[Deliverer] = None
        self.coordinator: Optional[DumpCoordinator] = None
        self.alive = True
        self.start_lsn: Optional[int] = None
        self._since_logpos = 0
        self._threads: list = []
        self._stop = threading.Event()

    @property
    def active(self) -> bool:
        return self.alive and self.engine is not None

    @property
    def epoch(self) -> Optional[int]:
        return self.lease.epoch if self.lease else None

    def try_activate(self) -> bool:
        if not self.alive:
            return False
        if self.active:
            return True
        role = self.store.acquire_leadership(self.instance_id, self.lease_duration)
        if not role.active:
            return False
        self.lease = role.lease
        raw = self.store.get_state(LOGPOS_PATH, "linearizable")
        if raw is None:
            start = self.db.head_lsn if self.initial_lsn is None else self.initial_lsn
            self.store.put_state(LOGPOS_PATH, str(start).encode(), epoch=self.epoch)
        else:
            start = int(raw)
        self.start_lsn = start
        self.buf = OutputBuffer(self.buffer_capacity, start_seq=self.sink.next_seq)
        self.coordinator = DumpCoordinator(self.store, self.db, self.epoch, uuid_factory=self.uuid_factory)
        self.coordinator.recover()
        self.engine = Engine(self.db, self.buf, start, instance_id=self.instance_id,
                             skip_through=self.sink.last_log_lsn, uuid_factory=self.uuid_factory,
                             read_lag_rng=self.read_lag_rng, traces=self.traces,
                             on_window_closed=self.coordinator.window_closed)
        self.deliverer = Deliverer(self.buf, self.sink, backoff=self.retry_backoff,
                                   on_delivered=self._delivered)
        logger.info("%s active with epoch %d from lsn %d", self.instance_id, self.epoch, start)
        return True

    def _delivered(self, e):
        if e.lsn is None:
            return
        self._since_logpos += 1
        if self._since_logpos >= self.logpos_interval:
            self._since_logpos = 0
            self.store.put_state(LOGPOS_PATH, str(e.lsn).encode(), epoch=self.epoch)

    def maybe_renew(self):
        if self.lease is None:
            return
        if self.lease.lease_expiry - self.store.clock() < self.lease_duration / 2:
            try:
                self.lease = self.store.renew_leadership(self.lease, self.lease_duration)
            except LeaseExpiredError:
                logger.warning("%s lost its lease; demoting", self.instance_id)
                self.crash()
                raise

    def can_step_engine(self) -> bool:
        return self.active and self.buf.free() >= self.engine.room_needed()

    def step_engine(self) -> str:
        """Renew the lease, apply dump control, then one engine step."""
        self.maybe_renew()
        self.coordinator.step(self.engine, self.deliverer.delivered_seq)
        return self.engine.step()

    def step_delivery(self) -> bool:
        return self.deliverer.step()

    def quiescent(self) -> bool:
        return (self.active and self.engine.at_head and not self.engine.busy
                and len(self.buf) == 0 and self.coordinator.active_dump is None)

    def crash(self):
        """Lose all in-memory state without releasing the lease."""
        self.alive = False
        self._stop.set()
        if self.buf is not None:
            self.buf.close()

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join()
        if self.lease is not None and self.alive:
            try:
                self.store.release_leadership(self.lease)
            except LeaseExpiredError:
                pass
        self.alive = False

    # -- free-running mode --

    def start_threads(self, idle_sleep: float = 0.0005):
        """Run engine and delivery in their own threads until :meth:`stop`."""

        def engine_loop():
            try:
                while not self._stop.is_set():
                    if self.step_engine() == "idle":
                        time.sleep(idle_sleep)
            except Exception:
                logger.exception("engine loop failed")
                self.crash()
            finally:
                self.buf.close()

        def delivery_loop():
            try:
                self.deliverer.run(poll=0.01)
            except Exception:
                self.crash()

        for fn in (engine_loop, delivery_loop):
            t = threading.Thread(target=fn, name=f"{self.instance_id}-{fn.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
