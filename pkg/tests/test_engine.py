from __future__ import annotations

import random
import uuid

import pytest

from conftest import make_table
from wmcdc import checks
from wmcdc.capture import OutputBuffer
from wmcdc.engine import (
    ChunkBuffer, Engine, EngineWindowState, ProtocolViolation, WindowBusyError, process_event,
)
from wmcdc.model import WatermarkPair
from wmcdc.sinks import materialize
from wmcdc.source import SimDatabase


def write(db, k, v):
    return db.put("t", (k,), {"c1": k, "c2": v, "c3": "w"})


def drain_buffer(buf):
    out = []
    while len(buf):
        out.append(buf.pop())
    return out


def test_window_evicts_touched_keys_and_orders_output():
    db = make_table(SimDatabase(), keys=range(1, 7))
    buf = OutputBuffer()
    eng = Engine(db, buf)  # starts at the head: the initial rows are not log output
    pre = write(db, 5, 1)
    eng.begin_chunk("t", None, 6)
    assert eng.step() == "lw"
    in1 = write(db, 1, 1)
    assert eng.step() == "select"
    in3 = write(db, 3, 1)
    assert eng.step() == "hw"
    post = write(db, 2, 1)
    eng.drain()
    out = drain_buffer(buf)

    selected = {(k,) for k in range(1, 7)}
    touched = {in1.key, in3.key}
    expected_dump = sorted(selected - touched)  # oracle: set difference
    dump_rows = [e for e in out if e.origin == "dump"]
    assert [e.key for e in dump_rows] == expected_dump == [(2,), (4,), (5,), (6,)]
    # pre-window log, window log, chunk rows, post-window log
    shape = [e.lsn if e.origin == "log" else "dump" for e in out]
    assert shape == [pre.lsn, in1.lsn, in3.lsn] + ["dump"] * 4 + [post.lsn]
    # k5 was updated before lw so its dump row carries the new version
    assert dump_rows[2].version == 2
    assert [e.seq for e in out] == list(range(1, len(out) + 1))
    assert checks.check_no_time_travel(out) == []


def test_open_window_selects_figure_chunk(ten_rows):
    buf = OutputBuffer()
    eng = Engine(ten_rows, buf)
    state = eng.open_window("t", (4,), 3)
    assert list(state.chunk.rows) == [(5,), (6,), (7,)]
    wm = [e for e in ten_rows.log if e.is_watermark]
    assert [e.watermark_value for e in wm] == [state.pair.lw, state.pair.hw]
    assert wm[0].lsn < wm[1].lsn


def test_empty_window_emits_whole_chunk(ten_rows):
    buf = OutputBuffer()
    outcome = Engine(ten_rows, buf).run_chunk("t", None, 4)
    assert [e.key for e in drain_buffer(buf)] == [(1,), (2,), (3,), (4,)]
    assert outcome.last_key == (4,) and not outcome.exhausted and outcome.emitted == 4


def test_repeated_chunks_cover_the_table(ten_rows):
    buf = OutputBuffer()
    eng = Engine(ten_rows, buf)
    last_keys, after = [], None
    while True:
        outcome = eng.run_chunk("t", after, 3)
        if outcome.exhausted:
            break
        last_keys.append(outcome.last_key)
        after = outcome.last_key
    assert last_keys == [(3,), (6,), (9,), (10,)]
    emitted = materialize(drain_buffer(buf))
    full = ten_rows.snapshot_select_range("t", None, 1000)
    assert emitted == {("t", k): (r, v) for k, r, v in full}


def test_single_row_table():
    db = make_table(SimDatabase(), keys=[7])
    eng = Engine(db, OutputBuffer())
    first = eng.run_chunk("t", None, 100)
    assert (first.selected, first.last_key, first.exhausted) == (1, (7,), False)
    assert eng.run_chunk("t", first.last_key, 100).exhausted


def test_remainder_after_max_key_is_empty(ten_rows):
    eng = Engine(ten_rows, OutputBuffer())
    outcome = eng.run_chunk("t", (10,), 3)
    assert outcome.exhausted and outcome.selected == 0
    assert eng.traces[-1].closed


def test_delete_in_window_evicts_row(ten_rows):
    buf = OutputBuffer()
    eng = Engine(ten_rows, buf)
    eng.begin_chunk("t", None, 3)
    eng.step()
    eng.step()
    ten_rows.delete("t", (2,))  # commits between the watermarks
    eng.step()
    eng.drain()
    out = drain_buffer(buf)
    assert [(e.key, e.origin, e.op) for e in out] == [
        ((2,), "log", "delete"), ((1,), "dump", "update"), ((3,), "dump", "update")]


def test_keys_scope_chunk(ten_rows):
    buf = OutputBuffer()
    outcome = Engine(ten_rows, buf).run_chunk("t", None, 5, keys=[(9,), (1,), (42,)])
    assert [e.key for e in drain_buffer(buf)] == [(1,), (9,)]
    assert outcome.last_key == (42,)


def test_orphan_watermark_is_ignored(ten_rows):
    buf = OutputBuffer()
    eng = Engine(ten_rows, buf)
    ten_rows.update_watermark(uuid.uuid4())  # left behind by an earlier instance
    eng.run_chunk("t", None, 2)
    assert [e.key for e in drain_buffer(buf)] == [(1,), (2,)]


def test_high_before_low_is_a_protocol_violation():
    pair = WatermarkPair(uuid.uuid4(), uuid.uuid4())
    db = SimDatabase()
    hw = db.update_watermark(pair.hw)
    state = EngineWindowState(pair, ChunkBuffer("t", {}, None, 0))
    with pytest.raises(ProtocolViolation):
        process_event(state, hw, OutputBuffer())


def test_second_chunk_while_busy(ten_rows):
    eng = Engine(ten_rows, OutputBuffer())
    eng.begin_chunk("t", None, 3)
    with pytest.raises(WindowBusyError):
        eng.begin_chunk("t", None, 3)
    with pytest.raises(ValueError):
        Engine(ten_rows, OutputBuffer()).begin_chunk("t", None, 0)


def test_pause_spans_three_steps_whatever_the_window(ten_rows):
    eng = Engine(ten_rows, OutputBuffer())
    for burst in (0, 5, 1000):
        eng.begin_chunk("t", None, 3)
        eng.step()
        eng.step()
        for i in range(burst):
            write(ten_rows, 1 + i % 10, i)
        eng.step()
        eng.drain()
    assert [ep.length for ep in eng.capture.pause_episodes] == [3, 3, 3]
    assert all(ep.consumed == 0 for ep in eng.capture.pause_episodes)


@pytest.mark.parametrize("seed", range(30))
def test_read_lag_selects_newer_rows_safely(seed):
    rng = random.Random(seed)
    db = make_table(SimDatabase(), keys=range(1, 21))
    buf = OutputBuffer()
    eng = Engine(db, buf, read_lag_rng=random.Random(seed))
    after = None
    while True:
        eng.begin_chunk("t", after, 4)
        eng.step()
        for _ in range(rng.randint(0, 6)):
            write(db, rng.randint(1, 20), rng.randint(0, 99))
        eng.step()
        for _ in range(rng.randint(0, 3)):
            write(db, rng.randint(1, 20), rng.randint(0, 99))
        eng.step()
        while eng.window is not None:
            eng.step()
        if eng.last_outcome.exhausted:
            break
        after = eng.last_outcome.last_key
    out = drain_buffer(buf)
    assert checks.check_no_time_travel(out) == []
    assert checks.check_window_dedup(eng.traces, db) == []
    assert materialize(out) == {("t", k): v for k, v in db.current_state("t").items()}


def test_skip_through_suppresses_delivered_events(ten_rows):
    buf = OutputBuffer()
    eng = Engine(ten_rows, buf, start_lsn=0, skip_through=6)
    eng.drain()
    assert [e.lsn for e in drain_buffer(buf)] == [7, 8, 9, 10]
    assert eng.suppressed == 6
