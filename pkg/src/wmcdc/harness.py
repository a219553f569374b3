"""Scenario runner: writers, capture nodes and delivery under one scheduler.

In deterministic mode a seeded scheduler repeatedly picks one runnable actor
(a writer, the active node's engine, its delivery loop, or a standby polling
for the lease) and runs one bounded step of it.  The lease clock advances one
unit per tick.  The same seed and config always produce the same output.

Crash points name a chunk boundary and a phase:

``close``
    right after the window closes, before any of its rows are delivered
``partial``
    after about half of the chunk's rows are delivered
``checkpoint``
    right after the chunk's checkpoint is written

The crashed node loses its memory and stops renewing its lease; a standby
(or a freshly started instance) takes over once the lease expires.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import checks
from .coordination import ManualClock, MemoryStateStore, check_mutual_exclusion
from .dump import DumpRequest, Scope
from .node import Node
from .sinks import CompactedTopic, FileSink, FlakySink, MemorySink, Sink, write_events
from .source import SimDatabase
from .workload import Workload, apply_op, generate_workload, oracle_final_state, writer_of

logger = logging.getLogger(__name__)

CRASH_PHASES = ("close", "partial", "checkpoint")


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    seed: int = 42
    tables: int = 2
    initial_rows: int = 100
    pk_arity: int = 1
    ops: int = 500
    op_mix: tuple = (0.3, 0.5, 0.2)
    writers: int = 4
    dump_at: Optional[int] = 250  # committed writes before the dump is requested; None = no dump
    scope: str = "all"
    chunk_size: int = 100
    throttle: int = 0
    read_lag: bool = False
    crash_points: list = field(default_factory=list)  # [{"chunk": n, "phase": p}]
    sink_faults: list = field(default_factory=list)  # seqs that fail once
    standbys: int = 0
    lease_duration: int = 50
    logpos_interval: int = 100
    buffer_capacity: int = 65536
    mode: str = "deterministic"  # or free
    sink: str = "memory"  # memory | topic
    max_idle_ticks: int = 100_000

    def validate(self):
        if self.mode not in ("deterministic", "free"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        if self.tables < 1 or self.initial_rows < 0 or self.ops < 0 or self.writers < 1:
            raise ConfigError("tables/writers must be positive, initial_rows/ops non-negative")
        if self.pk_arity not in (1, 2):
            raise ConfigError("pk_arity must be 1 or 2")
        if len(self.op_mix) != 3 or min(self.op_mix) < 0 or sum(self.op_mix) <= 0:
            raise ConfigError("op_mix needs three non-negative weights")
        if self.throttle < 0:
            raise ConfigError("throttle must be non-negative")
        if self.buffer_capacity <= self.chunk_size:
            raise ConfigError("buffer_capacity must exceed chunk_size")
        if self.sink not in ("memory", "topic"):
            raise ConfigError(f"unknown sink {self.sink!r}")
        for cp in self.crash_points:
            if cp.get("phase") not in CRASH_PHASES or int(cp.get("chunk", 0)) < 1:
                raise ConfigError(f"bad crash point {cp!r}")
        if self.mode == "free" and (self.crash_points or self.standbys):
            raise ConfigError("crash points and standbys need deterministic mode")
        try:
            Scope.parse(self.scope)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_json(self) -> str:
        d = asdict(self)
        d["op_mix"] = list(self.op_mix)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "op_mix" in d:
            d["op_mix"] = tuple(d["op_mix"])
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_json(Path(path).read_text())


@dataclass
class RunReport:
    seed: int
    passed: bool = False
    ticks: int = 0
    events_delivered: int = 0
    log_events: int = 0
    dump_rows: int = 0
    windows: int = 0
    crashes: int = 0
    epochs: list = field(default_factory=list)
    pause_episodes: list = field(default_factory=list)  # [start, end, consumed]
    violations: list = field(default_factory=list)  # [invariant, evidence]
    final_diff: list = field(default_factory=list)
    covered_tables: list = field(default_factory=list)
    elapsed: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=str)

    def to_text(self) -> str:
        lines = [
            f"seed {self.seed}: {'PASS' if self.passed else 'FAIL'}",
            f"  delivered {self.events_delivered} events ({self.log_events} log, {self.dump_rows} dump rows)",
            f"  windows {self.windows}, pause episodes {len(self.pause_episodes)}, "
            f"max pause {max((e - s for s, e, _ in self.pause_episodes), default=0)} steps",
            f"  crashes {self.crashes}, epochs {self.epochs}, ticks {self.ticks}, {self.elapsed:.2f}s",
            f"  completeness checked for {len(self.covered_tables)} table(s)",
        ]
        for name, evidence in self.violations[:50]:
            lines.append(f"  VIOLATION {name}: {evidence}")
        if len(self.violations) > 50:
            lines.append(f"  ... {len(self.violations) - 50} more violations")
        return "\n".join(lines)


@dataclass
class RunResult:
    """Everything a caller may want to inspect after a run."""

    config: ScenarioConfig
    report: RunReport
    workload: Workload
    db: SimDatabase
    sink: Sink
    events: list
    traces: list
    store: MemoryStateStore
    nodes: list

    def write_events(self, path):
        write_events(path, self.events)


def _uuid_factory(rng: random.Random):
    return lambda: uuid.UUID(int=rng.getrandbits(128), version=4)


def build_source(w: Workload) -> SimDatabase:
    db = SimDatabase()
    for s in w.tables:
        db.create_table(s.name, s.columns, s.pk)
    for op in w.initial:
        apply_op(db, op)
    return db


class _Scenario:
    def __init__(self, cfg: ScenarioConfig, out_path=None):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.workload = generate_workload(cfg.seed, cfg.tables, cfg.initial_rows, cfg.ops,
                                          cfg.op_mix, cfg.pk_arity)
        self.db = build_source(self.workload)
        self.start_lsn = self.db.head_lsn
        self.clock = ManualClock()
        self.store = MemoryStateStore(clock=self.clock if cfg.mode == "deterministic" else time.monotonic)
        if out_path is not None:
            Path(out_path).unlink(missing_ok=True)  # a run always starts a fresh output
            inner: Sink = FileSink(out_path)
        elif cfg.sink == "topic":
            inner = CompactedTopic()
        else:
            inner = MemorySink()
        self.inner_sink = inner
        self.sink = FlakySink(inner, {int(s): 1 for s in cfg.sink_faults}) if cfg.sink_faults else inner
        self.delivered: list = []
        self.traces: list = []
        self.nodes: list[Node] = []
        self.crashes = 0
        self.windows_closed = 0
        self.checkpoints = 0
        self.crash_plan = sorted((int(c["chunk"]), c["phase"]) for c in cfg.crash_points)
        self.partial_target: Optional[tuple] = None
        self.dump_requested = cfg.dump_at is None
        self.dump_trigger = None if cfg.dump_at is None else min(cfg.dump_at, cfg.ops)
        self.dump_id: Optional[str] = None
        self.committed = 0
        self._uuid = _uuid_factory(random.Random(f"uuid-{cfg.seed}"))
        self._lag_rng = random.Random(f"lag-{cfg.seed}") if cfg.read_lag else None
        self._next_instance = 0
        self.last_control = float("-inf")

        queues = [[] for _ in range(cfg.writers)]
        for op in self.workload.ops:
            queues[writer_of(op, cfg.writers)].append(op)
        self.writer_queues = [q[::-1] for q in queues]  # pop() from the end

    def new_node(self) -> Node:
        name = f"engine-{self._next_instance}"
        self._next_instance += 1
        node = Node(name, self.db, self.store, self.sink,
                    lease_duration=self.cfg.lease_duration,
                    logpos_interval=self.cfg.logpos_interval,
                    buffer_capacity=self.cfg.buffer_capacity,
                    uuid_factory=self._uuid, read_lag_rng=self._lag_rng, traces=self.traces,
                    initial_lsn=self.start_lsn)
        self.nodes.append(node)
        return node

    def active_node(self) -> Optional[Node]:
        for n in self.nodes:
            if n.active:
                return n
        return None

    def on_activate(self, node: Node):
        node.coordinator.listeners.append(self._dump_event)
        node.deliverer.on_delivered = self._wrap_delivered(node, node.deliverer.on_delivered)

    def _wrap_delivered(self, node, inner):
        def fn(e):
            self.delivered.append(e)
            inner(e)
            if self.partial_target is not None and e.seq >= self.partial_target[1]:
                self.partial_target = None
                self._crash(node)
        return fn

    def _dump_event(self, name, dump_id, table, outcome):
        if name == "closed":
            self.windows_closed += 1
            self._maybe_crash("close", self.windows_closed, outcome)
        elif name == "checkpoint":
            self.checkpoints += 1
            self._maybe_crash("checkpoint", self.checkpoints, outcome)

    def _maybe_crash(self, phase, count, outcome):
        if not self.crash_plan or self.crash_plan[0][0] != count:
            return
        want = self.crash_plan[0][1]
        if phase == "close" and want == "partial" and outcome.emitted:
            self.crash_plan.pop(0)
            first = outcome.upto_seq - outcome.emitted + 1
            self.partial_target = (count, first + outcome.emitted // 2)
        elif phase == want or (phase == "close" and want == "partial"):
            self.crash_plan.pop(0)
            self._pending_crash = True

    def _crash(self, node: Node):
        logger.info("crashing %s", node.instance_id)
        node.crash()
        self.crashes += 1
        if not any(n.alive and not n.active for n in self.nodes):
            self.new_node()

    def request_dump(self, node: Node):
        cfg = self.cfg
        req = DumpRequest(Scope.parse(cfg.scope), cfg.chunk_size, cfg.throttle,
                          dump_id=str(self._uuid()))
        self.dump_id = node.coordinator.request_dump(req)
        self.dump_requested = True

    def writers_done(self) -> bool:
        return not any(self.writer_queues)

    def quiescent(self) -> bool:
        node = self.active_node()
        return (self.writers_done() and node is not None and node.quiescent()
                and self.dump_requested and self.partial_target is None)

    # -- deterministic mode --

    def run_deterministic(self) -> int:
        cfg = self.cfg
        for _ in range(1 + cfg.standbys):
            self.new_node()
        ticks = 0
        idle = 0
        self._pending_crash = False
        while True:
            self.clock.advance(1)
            for n in self.nodes:
                if n.alive and not n.active and n.try_activate():
                    self.on_activate(n)
            node = self.active_node()
            if node is not None:
                node.maybe_renew()  # heartbeat, independent of engine scheduling
            if node is not None and not self.dump_requested and self.committed >= self.dump_trigger:
                self.request_dump(node)
            if self.quiescent():
                return ticks
            actors = [("w", i) for i, q in enumerate(self.writer_queues) if q]
            if node is not None:
                if node.can_step_engine():
                    actors.append(("e", node))
                if len(node.buf):
                    actors.append(("d", node))
            ticks += 1
            if not actors:
                idle += 1  # waiting for a lease to expire
            else:
                kind, who = self.rng.choice(actors)
                progressed = True
                if kind == "w":
                    apply_op(self.db, self.writer_queues[who].pop())
                    self.committed += 1
                elif kind == "e":
                    progressed = who.step_engine() != "idle"
                    if self._pending_crash:
                        self._pending_crash = False
                        self._crash(who)
                else:
                    who.step_delivery()
                idle = 0 if progressed else idle + 1
            if idle > cfg.max_idle_ticks:
                raise Deadlock(self.diagnose())

    def diagnose(self) -> str:
        node = self.active_node()
        if node is None:
            return "no active node"
        eng = node.engine
        return (f"writers_done={self.writers_done()} at_head={eng.at_head} busy={eng.busy} "
                f"phase={eng.phase} buffer={len(node.buf)} dump={node.coordinator.active_dump} "
                f"dump_requested={self.dump_requested}")

    # -- free-running mode --

    def run_free(self, timeout: float = 120.0, linger: float = 0.0, write_interval: float = 0.0) -> int:
        """Real threads for writers, engine and delivery.

        After quiescence the run keeps serving control commands until
        ``linger`` seconds pass without one.
        """
        cfg = self.cfg
        node = self.new_node()
        if not node.try_activate():
            raise RuntimeError("could not acquire leadership")
        self.on_activate(node)
        node.start_threads()
        lock = threading.Lock()

        def writer(q):
            while q:
                apply_op(self.db, q.pop())
                with lock:
                    self.committed += 1
                time.sleep(write_interval)

        threads = [threading.Thread(target=writer, args=(q,), daemon=True) for q in self.writer_queues]
        for t in threads:
            t.start()
        deadline = time.monotonic() + timeout
        try:
            while True:
                if not node.alive:
                    raise RuntimeError("node halted")
                if not self.dump_requested and self.committed >= self.dump_trigger:
                    self.request_dump(node)
                if all(not t.is_alive() for t in threads) and self.quiescent():
                    if time.monotonic() - self.last_control >= linger:
                        return 0
                elif time.monotonic() > deadline:
                    raise Deadlock(self.diagnose())
                time.sleep(0.002)
        finally:
            node.stop()

    def covered_tables(self) -> list:
        """Tables whose full state the output should hold at quiescence."""
        if self.cfg.initial_rows == 0:
            return sorted(self.db.tables)
        covered = set()
        for path in self.store.paths("dumps/"):
            rec = json.loads(self.store.get_state(path))
            if rec["state"] == "complete" and rec["scope"]["kind"] in ("all", "table"):
                covered.update(rec["tables"])
        return sorted(covered)


class Deadlock(RuntimeError):
    pass


def run_scenario(cfg: ScenarioConfig, out_path=None, *, on_start=None, linger: float = 0.0,
                 write_interval: float = 0.0) -> RunResult:
    """Run one scenario to quiescence and check every invariant.

    ``on_start`` is called with the internal scenario object before the run
    starts (the control server uses it to reach the active node).
    """
    cfg.validate()
    t0 = time.perf_counter()
    sc = _Scenario(cfg, out_path)
    report = RunReport(cfg.seed)
    violations: list = []
    if on_start is not None:
        on_start(sc)
    try:
        if cfg.mode == "deterministic":
            report.ticks = sc.run_deterministic()
        else:
            sc.run_free(linger=linger, write_interval=write_interval)
    except Deadlock as exc:
        violations.append(checks.Violation("progress", f"no progress: {exc}"))
    except Exception as exc:
        logger.exception("scenario failed")
        violations.append(checks.Violation("progress", f"{type(exc).__name__}: {exc}"))

    events = sc.delivered
    if isinstance(sc.inner_sink, FileSink):
        sc.inner_sink.close()

    covered = sc.covered_tables()
    oracle = oracle_final_state(sc.workload.all_ops())
    diff, found = checks.check_completeness(events, sc.db, sc.start_lsn, oracle, tables=covered)
    violations += found
    violations += checks.check_seq_order(events)
    violations += checks.check_no_time_travel(events)
    violations += checks.check_window_dedup(sc.traces, sc.db)
    episodes = [p for n in sc.nodes if n.engine for p in n.engine.capture.pause_episodes]
    violations += checks.check_non_stall(episodes)
    violations += checks.check_no_locks(sc.db)
    violations += checks.check_resume(sc.traces, sc.crashes)
    violations += [checks.Violation("leadership", p)
                   for p in check_mutual_exclusion(sc.store.lease_journal)]

    report.events_delivered = len(events)
    report.log_events = sum(1 for e in events if e.origin == "log")
    report.dump_rows = report.events_delivered - report.log_events
    report.windows = len(sc.traces)
    report.crashes = sc.crashes
    report.epochs = [n.epoch for n in sc.nodes if n.epoch is not None]
    report.pause_episodes = [[p.start, p.end, p.consumed] for p in episodes]
    report.violations = [[v.invariant, v.evidence] for v in violations]
    report.final_diff = [[t, list(k), a, b] for t, k, a, b in diff]
    report.covered_tables = covered
    report.passed = not violations
    report.elapsed = time.perf_counter() - t0
    return RunResult(cfg, report, sc.workload, sc.db, sc.inner_sink, events, sc.traces, sc.store, sc.nodes)
