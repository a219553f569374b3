from __future__ import annotations

import random
import uuid

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from wmcdc.model import WATERMARK_TABLE
from wmcdc.source import (
    MissingRowError, ReadBeyondHeadError, RetentionError, SchemaError, SimDatabase,
    UnknownTableError,
)


def row(k, v=0):
    return {"c1": k, "c2": v, "c3": "x"}


def test_create_table_shapes(db):
    t = db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    assert t.schema == ["c1", "c2", "c3"] and t.pk_columns == ["c1"]
    with pytest.raises(SchemaError):
        db.create_table("u", ["c1"], [])
    comp = db.create_table("ab", ["a", "b"], ["b", "a"])
    assert comp.key_of({"a": 1, "b": "z"}) == ("z", 1)


@pytest.mark.parametrize("name", ["t", WATERMARK_TABLE, "_dblog.other"])
def test_reserved_and_duplicate_names(db, name):
    db.create_table("t", ["c1"], ["c1"])
    with pytest.raises(SchemaError):
        db.create_table(name, ["c1"], ["c1"])


def test_put_versions_and_ops(db):
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    e1 = db.put("t", (1,), row(1))
    assert (e1.op, e1.version) == ("create", 1)
    e2 = db.put("t", (1,), row(1, 5))
    assert (e2.op, e2.version) == ("update", 2)


def test_interleaved_puts():
    db = SimDatabase()
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    events = [db.put("t", (k,), row(k)) for k in (1, 2, 1)]
    assert [e.lsn for e in events] == [1, 2, 3]
    assert [e.version for e in events] == [1, 1, 2]


def test_delete_versions(db):
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    db.put("t", (1,), row(1))
    db.put("t", (1,), row(1, 2))
    d = db.delete("t", (1,))
    assert (d.op, d.version, d.row) == ("delete", 3, None)
    again = db.put("t", (1,), row(1))
    assert (again.op, again.version) == ("create", 4)
    with pytest.raises(MissingRowError):
        db.delete("t", (2,))


def test_put_validates_rows(db):
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    with pytest.raises(SchemaError):
        db.put("t", (1,), {"c1": 1})
    with pytest.raises(SchemaError):
        db.put("t", (2,), row(1))
    with pytest.raises(UnknownTableError):
        db.put("nope", (1,), row(1))


def test_watermark_events(db):
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    u1, u2 = uuid.uuid4(), uuid.uuid4()
    cur = db.subscribe_log(db.head_lsn)
    db.update_watermark(u1)
    db.update_watermark(u2)
    events = list(cur)
    assert [e.watermark_value for e in events] == [u1, u2]
    assert all(e.is_watermark and e.table == WATERMARK_TABLE for e in events)
    assert events[0].lsn < events[1].lsn
    assert db.current_state("t") == {}
    assert db.engine_lock_count() == 0


def test_select_range_figure_chunk(ten_rows):
    rows = ten_rows.snapshot_select_range("t", (4,), 3)
    assert [k for k, _, _ in rows] == [(5,), (6,), (7,)]


def test_select_range_empty_table(db):
    db.create_table("t", ["c1"], ["c1"])
    assert db.snapshot_select_range("t", None, 10) == []
    with pytest.raises(ValueError):
        db.snapshot_select_range("t", None, 0)


def test_select_beyond_head(ten_rows):
    with pytest.raises(ReadBeyondHeadError):
        ten_rows.snapshot_select_range("t", None, 3, as_of=ten_rows.head_lsn + 1)


def replay_state(log, table, as_of):
    """Independent oracle: fold the log prefix up to ``as_of``."""
    state = {}
    for e in log:
        if e.lsn > as_of:
            break
        if e.table != table:
            continue
        if e.op == "delete":
            state.pop(e.key, None)
        else:
            state[e.key] = (e.row, e.version)
    return state


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_chunked_scan_matches_log_replay(seed, chunk):
    rng = random.Random(seed)
    db = SimDatabase()
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    for _ in range(120):
        k = rng.randint(1, 25)
        if k in {key[0] for key in db.current_state("t")} and rng.random() < 0.3:
            db.delete("t", (k,))
        else:
            db.put("t", (k,), row(k, rng.randint(0, 9)))
    as_of = rng.randint(0, db.head_lsn)
    got, after = {}, None
    while True:
        rows = db.snapshot_select_range("t", after, chunk, as_of)
        if not rows:
            break
        for k, r, v in rows:
            assert k not in got
            got[k] = (r, v)
        after = rows[-1][0]
    assert got == replay_state(db.log, "t", as_of)
    assert got == {k: (r, v) for k, r, v in db.snapshot_select_range("t", None, 10**6, as_of)}


def test_current_state(ten_rows):
    full = ten_rows.snapshot_select_range("t", None, 100)
    assert ten_rows.current_state("t") == {k: (r, v) for k, r, v in full}
    db = SimDatabase()
    db.create_table("t", ["c1", "c2", "c3"], ["c1"])
    db.put("t", (1,), row(1))
    db.delete("t", (1,))
    assert db.current_state("t") == {}


def test_select_keys(ten_rows):
    rows = ten_rows.select_keys("t", [(9,), (1,), (42,)])
    assert [k for k, _, _ in rows] == [(1,), (9,)]


def test_subscribe_replays_everything():
    db = make_table(SimDatabase(), keys=range(1, 6))
    cur = db.subscribe_log(0)
    lsns = [e.lsn for e in cur]
    assert lsns == [1, 2, 3, 4, 5]
    assert cur.next() is None and cur.at_head()


def test_cursor_keeps_position_across_writes():
    db = make_table(SimDatabase(), keys=[1])
    cur = db.subscribe_log(db.head_lsn)
    committed = [db.put("t", (1,), row(1, i)).lsn for i in range(100)]
    assert [e.lsn for e in cur] == committed


def test_retention():
    db = SimDatabase(retention=5)
    make_table(db, keys=range(1, 11))
    assert db.retention_floor == 5
    with pytest.raises(RetentionError):
        db.subscribe_log(2)
    assert [e.lsn for e in db.subscribe_log(5)] == [6, 7, 8, 9, 10]
    cur = db.subscribe_log(6)
    for k in range(11, 20):
        db.put("t", (k,), row(k))
    with pytest.raises(RetentionError):
        cur.next()


def test_app_writes_are_recorded_as_app_locks(ten_rows):
    assert ten_rows.locks[("app", "t")] == 10
    assert ten_rows.engine_lock_count() == 0
