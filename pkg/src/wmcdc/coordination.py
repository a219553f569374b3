"""Progress storage and leader election.

Two interchangeable stores are provided: :class:`MemoryStateStore` for
in-process and deterministic use, and :class:`FileStateStore`, a directory
shared between processes that uses a lock file plus atomic renames.

Leadership is a lease with an epoch that grows on every change of holder.
State writes may carry the writer's epoch; a write stamped with an epoch
older than the current lease epoch is rejected, so a paused former leader
cannot overwrite checkpoints written by its successor.
"""

from __future__ import annotations

import fcntl
import json
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

LEASE_PATH = "lease"
LOGPOS_PATH = "logpos"


class StoreUnavailableError(RuntimeError):
    pass


class FencedWriteError(RuntimeError):
    pass


class LeaseExpiredError(RuntimeError):
    pass


@dataclass(frozen=True)
class LeaderLease:
    instance_id: str
    lease_expiry: float
    epoch: int


@dataclass(frozen=True)
class Role:
    active: bool
    lease: Optional[LeaderLease] = None

    @property
    def epoch(self) -> Optional[int]:
        return self.lease.epoch if self.lease else None


PASSIVE = Role(False)


class ManualClock:
    """A clock the caller advances explicitly."""

    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, dt: float = 1.0):
        self.now += dt


class StateStore:
    """Common lease and fencing logic; subclasses supply raw storage."""

    def __init__(self, clock: Callable[[], float] = time.time):
        self.clock = clock
        self.available = True
        # (instance_id, epoch, acquired_at, ends_at) per leadership term
        self.lease_journal: list[list] = []

    # raw storage hooks
    def _read(self, path: str, linearizable: bool) -> Optional[bytes]:
        raise NotImplementedError

    def _write(self, path: str, data: bytes):
        raise NotImplementedError

    @contextmanager
    def _exclusive(self):
        raise NotImplementedError
        yield

    def _check_available(self):
        if not self.available:
            raise StoreUnavailableError("state store unavailable")

    def _lease(self) -> Optional[LeaderLease]:
        raw = self._read(LEASE_PATH, True)
        if raw is None:
            return None
        rec = json.loads(raw)
        return LeaderLease(rec["instance_id"], rec["lease_expiry"], rec["epoch"])

    def _put_lease(self, lease: LeaderLease):
        self._write(LEASE_PATH, json.dumps(asdict(lease), separators=(",", ":")).encode())

    def current_epoch(self) -> int:
        lease = self._lease()
        return lease.epoch if lease else 0

    def put_state(self, path: str, data: bytes, epoch: Optional[int] = None):
        self._check_available()
        if path == LEASE_PATH:
            raise ValueError("the lease record is managed by the leadership calls")
        with self._exclusive():
            if epoch is not None:
                current = self.current_epoch()
                if epoch < current:
                    raise FencedWriteError(f"write to {path!r} with epoch {epoch} < current {current}")
            self._write(path, data)

    def get_state(self, path: str, mode: str = "plain") -> Optional[bytes]:
        self._check_available()
        if mode not in ("plain", "linearizable"):
            raise ValueError(f"unknown read mode {mode!r}")
        if mode == "linearizable":
            with self._exclusive():
                return self._read(path, True)
        return self._read(path, False)

    def acquire_leadership(self, instance_id: str, lease_duration: float) -> Role:
        if not self.available:
            return PASSIVE
        with self._exclusive():
            now = self.clock()
            lease = self._lease()
            if lease is not None and lease.lease_expiry > now:
                if lease.instance_id == instance_id:
                    return Role(True, lease)
                return PASSIVE
            epoch = (lease.epoch if lease else 0) + 1
            new = LeaderLease(instance_id, now + lease_duration, epoch)
            self._put_lease(new)
            self.lease_journal.append([instance_id, epoch, now, new.lease_expiry])
            return Role(True, new)

    def renew_leadership(self, lease: LeaderLease, lease_duration: float) -> LeaderLease:
        self._check_available()
        with self._exclusive():
            now = self.clock()
            current = self._lease()
            if (current is None or current.epoch != lease.epoch
                    or current.instance_id != lease.instance_id or current.lease_expiry <= now):
                raise LeaseExpiredError(f"{lease.instance_id} lost leadership (epoch {lease.epoch})")
            new = LeaderLease(lease.instance_id, now + lease_duration, lease.epoch)
            self._put_lease(new)
            self._journal_end(lease.epoch, new.lease_expiry)
            return new

    def release_leadership(self, lease: LeaderLease):
        self._check_available()
        with self._exclusive():
            now = self.clock()
            current = self._lease()
            if current is None or current.epoch != lease.epoch:
                raise LeaseExpiredError(f"{lease.instance_id} no longer holds epoch {lease.epoch}")
            # keep the epoch so the next holder still gets epoch + 1
            self._put_lease(LeaderLease(lease.instance_id, now, lease.epoch))
            self._journal_end(lease.epoch, now)

    def _journal_end(self, epoch: int, ends_at: float):
        for entry in self.lease_journal:
            if entry[1] == epoch:
                entry[3] = ends_at


class MemoryStateStore(StateStore):
    """In-process store; plain and linearizable reads see the same single copy."""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        super().__init__(clock)
        self.entries: dict[str, bytes] = {}
        self._lock = threading.RLock()

    def _read(self, path, linearizable):
        return self.entries.get(path)

    def _write(self, path, data):
        self.entries[path] = bytes(data)

    @contextmanager
    def _exclusive(self):
        with self._lock:
            yield

    def paths(self, prefix: str = "") -> list[str]:
        return sorted(p for p in self.entries if p.startswith(prefix))


class FileStateStore(StateStore):
    """Store rooted at a directory, e.g. ``state/``.

    Layout: ``lease``, ``logpos``, ``checkpoints/<dump_id>/<table>``,
    ``dumps/<dump_id>``.  Each record is one text file replaced atomically.
    """

    def __init__(self, root, clock: Callable[[], float] = time.time):
        super().__init__(clock)
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lockfile = self.root / ".lock"
        self._tlock = threading.RLock()
        self._depth = 0

    def _file(self, path: str) -> Path:
        parts = Path(path).parts
        if not parts or any(p in ("..", "") for p in parts) or Path(path).is_absolute():
            raise ValueError(f"bad state path {path!r}")
        return self.root.joinpath(*parts)

    def _read(self, path, linearizable):
        try:
            return self._file(path).read_bytes()
        except FileNotFoundError:
            return None

    def _write(self, path, data):
        target = self._file(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{target.name}.{os.getpid()}.tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)

    @contextmanager
    def _exclusive(self):
        with self._tlock:
            if self._depth:
                self._depth += 1
                try:
                    yield
                finally:
                    self._depth -= 1
                return
            with open(self._lockfile, "a+") as fh:
                fcntl.flock(fh, fcntl.LOCK_EX)
                self._depth = 1
                try:
                    yield
                finally:
                    self._depth = 0
                    fcntl.flock(fh, fcntl.LOCK_UN)

    def paths(self, prefix: str = "") -> list[str]:
        out = []
        for p in self.root.rglob("*"):
            if p.is_file() and not p.name.startswith("."):
                rel = p.relative_to(self.root).as_posix()
                if rel.startswith(prefix):
                    out.append(rel)
        return sorted(out)


def check_mutual_exclusion(journal) -> list[str]:
    """Leadership terms, ordered by epoch, must not overlap in time."""
    problems = []
    terms = sorted(journal, key=lambda t: t[1])
    for prev, cur in zip(terms, terms[1:]):
        if cur[1] <= prev[1]:
            problems.append(f"epoch {cur[1]} did not increase after {prev[1]}")
        if cur[2] < prev[3]:
            problems.append(f"epoch {cur[1]} ({cur[0]}) began at {cur[2]} before epoch "
                            f"{prev[1]} ({prev[0]}) ended at {prev[3]}")
    return problems
