"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line so the suite
output doubles as a checklist.
"""

from __future__ import annotations

import time

import pytest

from conftest import make_table
from wmcdc import checks
from wmcdc.capture import OutputBuffer
from wmcdc.engine import Engine
from wmcdc.harness import ScenarioConfig, run_scenario
from wmcdc.model import WATERMARK_TABLE
from wmcdc.sinks import CompactedTopic, materialize
from wmcdc.source import SimDatabase
from wmcdc.workload import oracle_final_state

BIG = dict(seed=42, tables=5, initial_rows=2000, ops=10_000, dump_at=5000, scope="all", chunk_size=100)


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def big_run():
    t0 = time.perf_counter()
    r = run_scenario(ScenarioConfig(**BIG, sink="topic"))
    return r, time.perf_counter() - t0


def state_rows(mat):
    return {k: row for k, (row, _) in mat.items()}


def test_c1_completeness_under_concurrency(big_run, report):
    r, elapsed = big_run
    oracle = oracle_final_state(r.workload.all_ops())
    mat = state_rows(materialize(r.events))
    log_v = checks.check_log_capture(r.events, r.db, r.nodes[0].start_lsn)
    ok = (r.report.passed and mat == oracle and not r.report.final_diff and not log_v
          and sorted(r.report.covered_tables) == [f"t{i}" for i in range(5)] and elapsed < 30)
    report(1, ok, f"{len(oracle)} rows, oracle diff {len(r.report.final_diff)}, "
                  f"{r.report.log_events} log events once in LSN order, {r.report.windows} windows, "
                  f"{elapsed:.1f}s")


def test_c2_no_time_travel_under_read_lag(report):
    regressions, failed, dump_rows = 0, [], 0
    for seed in range(1000):
        r = run_scenario(ScenarioConfig(seed=seed, tables=2, initial_rows=100, ops=500, dump_at=250,
                                        chunk_size=10, read_lag=True))
        tt = checks.check_no_time_travel(r.events)
        regressions += len(tt)
        dump_rows += r.report.dump_rows
        if not r.report.passed:
            failed.append(seed)
    report(2, regressions == 0 and not failed,
           f"1000 read-lag runs, {regressions} version regressions, {len(failed)} failing runs, "
           f"{dump_rows} dump rows checked")


def test_c3_window_dedup(report):
    windows, touched, bad = 0, 0, []
    configs = []
    for seed in range(60):
        configs.append(dict(seed=seed, initial_rows=60, ops=600, dump_at=100, chunk_size=7,
                            read_lag=seed % 2 == 0, pk_arity=1 + seed % 2, writers=1 + seed % 4))
    for seed in range(10):
        configs.append(dict(seed=seed, initial_rows=60, ops=600, dump_at=100, chunk_size=7,
                            crash_points=[{"chunk": 1 + seed % 5, "phase": ("close", "partial", "checkpoint")[seed % 3]}],
                            standbys=seed % 2))
    for kw in configs:
        r = run_scenario(ScenarioConfig(**kw))
        found = checks.check_window_dedup(r.traces, r.db)
        windows += len(r.traces)
        touched += sum(1 for t in r.traces if t.removed)
        if found:
            bad.append((kw, found[0]))
    report(3, not bad and touched > 0,
           f"{len(configs)} runs, {windows} windows ({touched} with in-window changes to chunk keys), "
           f"{len(bad)} runs with dump rows for changed keys")


def test_c4_figure_chunk_condition(report):
    keys = [1, 2, 4, 5, 6, 7, 8, 9, 10, 11]  # 10 rows; the first chunk of 3 ends at 4
    db = make_table(SimDatabase(), keys=keys)
    buf = OutputBuffer()
    eng = Engine(db, buf)
    first = eng.run_chunk("t", None, 3)
    second = eng.run_chunk("t", first.last_key, 3)
    trace = eng.traces[1]
    emitted = [k for k, _, _ in trace.emitted]
    ok = first.last_key == (4,) and trace.after == (4,) and emitted == [(5,), (6,), (7,)]
    report(4, ok, f"chunk 2 selected with key > {trace.after[0]} returned {[k[0] for k in emitted]}")


def test_c5_crash_sweep(report):
    runs, bad = 0, []
    reselected = 0
    for phase in ("close", "partial", "checkpoint"):
        for chunk in range(1, 11):
            r = run_scenario(ScenarioConfig(seed=chunk, tables=1, initial_rows=100, ops=500, dump_at=100,
                                            scope="table:t0", chunk_size=10,
                                            crash_points=[{"chunk": chunk, "phase": phase}]))
            runs += 1
            # windows whose start key was already covered by a checkpoint
            ckpt, again = None, 0
            for t in r.traces:
                if t.after != ckpt:
                    bad.append((phase, chunk, "window does not start at the checkpoint"))
                if t.checkpointed:
                    ckpt = t.last_key if t.last_key is not None else ckpt
                else:
                    again += 1
            reselected += again
            if not r.report.passed or r.report.crashes != 1 or again > 1:
                bad.append((phase, chunk, r.report.violations[:3]))
    report(5, not bad, f"{runs} crash runs over 10 chunk boundaries x 3 phases, "
                       f"{reselected} in-flight chunks re-run, {len(bad)} failures")


def test_c6_non_stall_bound(report):
    lengths = set()
    consumed = 0
    for seed in range(20):
        r = run_scenario(ScenarioConfig(seed=seed, initial_rows=50, ops=800, dump_at=100,
                                        chunk_size=1 + seed % 13, writers=8))
        lengths |= {e - s for s, e, _ in r.report.pause_episodes}
        consumed += sum(c for _, _, c in r.report.pause_episodes)
    # a window stuffed with 1000 writes
    db = make_table(SimDatabase(), keys=range(1, 101))
    eng = Engine(db, OutputBuffer())
    for burst in (0, 10, 1000):
        eng.begin_chunk("t", None, 50)
        eng.step()
        eng.step()
        for i in range(burst):
            db.put("t", (1 + i % 100,), {"c1": 1 + i % 100, "c2": i, "c3": "x"})
        eng.step()
        while eng.window is not None:
            eng.step()
    lengths |= {ep.length for ep in eng.capture.pause_episodes}
    report(6, lengths == {3} and consumed == 0,
           f"pause lengths observed {sorted(lengths)} steps (2 watermark writes + 1 select), "
           f"log events consumed while paused {consumed}")


def test_c7_no_locks(big_run, report):
    r, _ = big_run
    engine_locks = r.db.engine_lock_count()
    wm = sum(n for (actor, table), n in r.db.locks.items() if table == WATERMARK_TABLE)
    report(7, engine_locks == 0 and wm == 2 * r.report.windows,
           f"{engine_locks} engine locks on application tables, {wm} watermark-row writes")


def test_c8_compacted_topic_bootstrap(big_run, report):
    r, _ = big_run
    oracle = oracle_final_state(r.workload.all_ops())
    full = {k: e.row for k, e in r.sink.compact().items()}
    first_dump = next(i for i, e in enumerate(r.events) if e.origin == "dump")
    n = len(r.events)
    # consumers that bootstrap before, during and late in the dump, then follow the tail
    cuts = [first_dump // 2, first_dump + (n - first_dump) // 3, n // 2, n - 100]
    good, regressions = 0, 0
    for cut in cuts:
        topic = CompactedTopic()
        for e in r.events[:cut]:
            topic.write(e)
        state, tail = topic.bootstrap_read()
        for e in r.events[cut:]:
            topic.write(e)
        versions = {k: v for k, (_, v) in state.items()}
        for e in tail:
            k = (e.table, e.key)
            regressions += e.version < versions.get(k, 0)
            versions[k] = max(versions.get(k, 0), e.version)
            materialize([e], state)
        good += state_rows(state) == oracle
    ok = full == oracle and good == len(cuts) and regressions == 0
    report(8, ok, f"compacted view {len(full)} keys equals the oracle; {good}/{len(cuts)} bootstrap "
                  f"points + tail ({min(n - c for c in cuts)}..{max(n - c for c in cuts)} events) "
                  f"reconstruct it, {regressions} regressions")


def test_c9_failover(report):
    bad, runs = [], 0
    for seed, (chunk, phase) in enumerate([(3, "partial"), (5, "close"), (7, "checkpoint"), (2, "partial")]):
        r = run_scenario(ScenarioConfig(seed=seed, tables=2, initial_rows=200, ops=1500, dump_at=500,
                                        chunk_size=20, standbys=1, read_lag=True,
                                        crash_points=[{"chunk": chunk, "phase": phase}]))
        runs += 1
        old, new = r.nodes[0], r.nodes[1]
        first_new = next(t for t in r.traces if t.instance == new.instance_id)
        ckpts = [t for t in r.traces if t.instance == old.instance_id and t.checkpointed]
        resumed_at = ckpts[-1].last_key if ckpts else None
        ok = (r.report.passed and r.report.epochs == [1, 2]
              and new.start_lsn > r.nodes[0].initial_lsn and first_new.after == resumed_at)
        if not ok:
            bad.append((seed, r.report.violations[:3]))
    report(9, not bad, f"{runs} leader kills mid-dump; successor epoch 2 resumed from persisted "
                       f"log position and checkpoint, {len(bad)} failures")


def test_c10_determinism(tmp_path, report):
    cfg = dict(seed=9, tables=3, initial_rows=300, ops=3000, dump_at=1000, chunk_size=25, read_lag=True,
               standbys=1, crash_points=[{"chunk": 4, "phase": "partial"}], sink_faults=[17])
    paths = []
    for i in range(2):
        p = tmp_path / f"run{i}.ndjson"
        r = run_scenario(ScenarioConfig(**cfg), out_path=p)
        assert r.report.passed, r.report.to_text()
        paths.append(p)
    a, b = paths[0].read_bytes(), paths[1].read_bytes()
    report(10, a == b and len(a) > 0, f"two runs wrote {len(a)} and {len(b)} bytes, identical={a == b}")
