"""Invariant checkers over delivered output and run instrumentation.

Each checker returns a list of :class:`Violation`; an empty list means the
invariant held.  None of them look at engine internals beyond the recorded
window traces, and the window check re-derives its answer from the source
log rather than trusting what the engine says it removed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .sinks import materialize


@dataclass(frozen=True)
class Violation:
    invariant: str
    evidence: str

    def __str__(self):
        return f"{self.invariant}: {self.evidence}"


def check_no_time_travel(events) -> list[Violation]:
    """Per key, delivered versions must never drop below one already delivered."""
    seen: dict = {}
    out = []
    for e in events:
        k = (e.table, e.key)
        prev = seen.get(k)
        if prev is not None and e.version < prev[0]:
            out.append(Violation(
                "no-time-travel",
                f"{e.table} key {list(e.key)}: seq {e.seq} carries version {e.version} "
                f"after seq {prev[1]} delivered version {prev[0]}"))
        if prev is None or e.version >= prev[0]:
            seen[k] = (e.version, e.seq)
    return out


def check_seq_order(events) -> list[Violation]:
    out = []
    prev = None
    for e in events:
        if prev is not None and e.seq != prev + 1:
            out.append(Violation("seq-order", f"seq {e.seq} follows {prev}"))
        prev = e.seq
    return out


def diff_states(expected: dict, actual: dict, compare_versions: bool = True) -> list:
    """Entries that differ as ``(table, key, expected, actual)``; values may be None."""
    diff = []
    for k in sorted(set(expected) | set(actual), key=repr):
        a, b = expected.get(k), actual.get(k)
        if not compare_versions:
            a = a[0] if isinstance(a, tuple) else a
            b = b[0] if isinstance(b, tuple) else b
        if a != b:
            diff.append((k[0], k[1], a, b))
    return diff


def source_state(db, tables: Optional[Iterable[str]] = None) -> dict:
    state = {}
    for name in (tables if tables is not None else db.tables):
        for key, (row, version) in db.current_state(name).items():
            state[(name, key)] = (row, version)
    return state


def check_log_capture(events, db, start_lsn: int) -> list[Violation]:
    """Every committed non-watermark event after ``start_lsn`` is output once, in LSN order."""
    delivered = [e.lsn for e in events if e.origin == "log"]
    expected = [e.lsn for e in db.log if e.lsn > start_lsn and not e.is_watermark]
    if delivered == expected:
        return []
    out = []
    for i, (a, b) in enumerate(zip(expected, delivered)):
        if a != b:
            out.append(Violation("log-capture", f"position {i}: expected lsn {a}, delivered lsn {b}"))
            break
    if len(delivered) != len(expected):
        out.append(Violation("log-capture",
                             f"{len(expected)} committed log events, {len(delivered)} delivered"))
    return out


def check_completeness(events, db, start_lsn: Optional[int] = None, oracle: Optional[dict] = None,
                       tables: Optional[Iterable[str]] = None) -> tuple[list, list[Violation]]:
    """Materialize the output and diff it against the source (and the oracle if given).

    ``tables`` limits the state comparison to tables whose full state the
    output is expected to hold.  Returns ``(diff, violations)``; the diff is
    against the source state, versions included.
    """
    events = list(events)
    tables = sorted(db.tables) if tables is None else list(tables)
    wanted = set(tables)
    mat = materialize(e for e in events if e.table in wanted)
    diff = diff_states(source_state(db, tables), mat)
    out = [Violation("completeness", f"{t} key {list(k)}: source {a!r}, output {b!r}")
           for t, k, a, b in diff[:20]]
    if len(diff) > 20:
        out.append(Violation("completeness", f"... {len(diff) - 20} more differences"))
    if oracle is not None:
        oracle = {k: v for k, v in oracle.items() if k[0] in wanted}
        odiff = diff_states(oracle, mat, compare_versions=False)
        out += [Violation("oracle", f"{t} key {list(k)}: oracle {a!r}, output {b!r}")
                for t, k, a, b in odiff[:20]]
    if start_lsn is not None:
        out += check_log_capture(events, db, start_lsn)
    return diff, out


def check_window_dedup(traces, db) -> list[Violation]:
    """No dump row may exist for a key that the log touched inside its window."""
    out = []
    by_lsn = {e.lsn: e for e in db.log}
    for t in traces:
        if not t.closed:
            continue
        emitted = {k for k, _, _ in t.emitted}
        if not emitted:
            continue
        for lsn in range(t.lw_lsn + 1, t.hw_lsn):
            e = by_lsn.get(lsn)
            if e is not None and e.table == t.table and e.key in emitted:
                out.append(Violation(
                    "window-dedup",
                    f"window {t.index} on {t.table}: key {list(e.key)} emitted as dump row "
                    f"but changed at lsn {lsn} between lw {t.lw_lsn} and hw {t.hw_lsn}"))
    return out


def check_non_stall(pause_episodes, bound: int = 3) -> list[Violation]:
    """Each pause spans at most ``bound`` engine steps and consumes no log events."""
    out = []
    for p in pause_episodes:
        if p.length > bound:
            out.append(Violation("non-stall", f"pause at step {p.start} lasted {p.length} steps (> {bound})"))
        if p.consumed:
            out.append(Violation("non-stall", f"pause at step {p.start} consumed {p.consumed} log events"))
    return out


def check_no_locks(db) -> list[Violation]:
    """The engine may only write the watermark table."""
    from .model import WATERMARK_TABLE
    return [Violation("no-locks", f"{actor} took {n} lock(s) on {table}")
            for (actor, table), n in sorted(db.locks.items())
            if actor != "app" and table != WATERMARK_TABLE]


def check_resume(traces, crashes: int = 0) -> list[Violation]:
    """Checkpointed chunk ranges are never selected again, and none are skipped.

    Per dump and table, each window must start exactly at the last
    checkpointed key.  Windows that never got checkpointed (in-flight chunks
    lost to a crash) may number at most one per crash.
    """
    out = []
    ckpt: dict = {}
    uncommitted = 0
    for t in traces:
        slot = (t.tag, t.table)
        last = ckpt.get(slot)
        if t.after != last:
            what = "re-selected" if t.after is None or (last is not None and t.after < last) else "skipped to"
            out.append(Violation("resume", f"window {t.index} on {t.table} {what} {t.after} "
                                           f"instead of checkpoint {last}"))
        if t.checkpointed:
            if t.last_key is not None:
                ckpt[slot] = t.last_key
        else:
            uncommitted += 1
    if uncommitted > crashes:
        out.append(Violation("resume", f"{uncommitted} windows were never checkpointed "
                                       f"but only {crashes} crash(es) happened"))
    return out
