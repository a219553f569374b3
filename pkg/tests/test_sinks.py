from __future__ import annotations

import pytest

from wmcdc import checks
from wmcdc.capture import Deliverer, OutputBuffer
from wmcdc.model import OutputEvent
from wmcdc.sinks import (
    CompactedTopic, FileSink, FlakySink, MemorySink, SequenceError, bootstrap_read, compact,
    materialize, read_events, write_events,
)


def log(seq, key, version, op="update", lsn=None, table="t"):
    row = None if op == "delete" else {"c1": key, "v": version}
    return OutputEvent(seq, table, op, (key,), row, "log", lsn or seq, version)


def dump(seq, key, version):
    return OutputEvent(seq, "t", "update", (key,), {"c1": key, "v": version}, "dump", None, version)


def test_gap_rejected():
    s = MemorySink()
    for i in (1, 2, 3):
        s.write(log(i, i, 1))
    with pytest.raises(SequenceError):
        s.write(log(5, 5, 1))
    with pytest.raises(SequenceError):
        s.write(log(3, 3, 1))
    assert s.last_seq == 3 and s.next_seq == 4


def test_file_sink_round_trip(tmp_path):
    path = tmp_path / "out.ndjson"
    events = [log(1, 1, 1, "create"), dump(2, 2, 3), log(3, 1, 2, "delete", lsn=9)]
    s = FileSink(path)
    for e in events:
        s.write(e)
    s.close()
    assert read_events(path) == events
    # reopening resumes after the last line
    s2 = FileSink(path)
    assert (s2.next_seq, s2.last_log_lsn) == (4, 9)
    s2.close()
    other = tmp_path / "copy.ndjson"
    write_events(other, events)
    assert other.read_bytes() == path.read_bytes()


def test_file_sink_retry_writes_one_line(tmp_path):
    path = tmp_path / "out.ndjson"
    inner = FileSink(path)
    buf = OutputBuffer()
    for i in range(1, 4):
        buf.append(log(i, i, 1))
    d = Deliverer(buf, FlakySink(inner, {2: 1}), backoff=0)
    while d.step():
        pass
    inner.close()
    assert [e.seq for e in read_events(path)] == [1, 2, 3]


def test_compaction_keeps_latest():
    view = compact([log(1, 1, 1, "create"), log(2, 1, 2)])
    assert view[("t", (1,))].version == 2 and len(view) == 1


def test_compaction_tombstone():
    assert compact([log(1, 1, 1, "create"), log(2, 1, 2, "delete")]) == {}


def test_empty_bootstrap():
    state, tail = bootstrap_read(CompactedTopic())
    assert state == {} and tail.next() is None


def test_bootstrap_then_tail():
    topic = CompactedTopic()
    for i in range(1, 6):
        topic.write(log(i, i, 1, "create"))
    state, tail = topic.bootstrap_read()
    assert len(state) == 5
    topic.write(log(6, 2, 2))
    topic.write(log(7, 3, 2, "delete"))
    materialize(tail, state)
    assert state == materialize(topic.entries)
    assert ("t", (3,)) not in state


def test_bootstrap_tail_never_regresses():
    topic = CompactedTopic()
    topic.write(log(1, 1, 1, "create"))
    topic.write(log(2, 1, 2))
    state, tail = topic.bootstrap_read()
    topic.write(dump(3, 1, 2))
    topic.write(log(4, 1, 3))
    versions = {k: v for k, (_, v) in state.items()}
    for e in tail:
        assert e.version >= versions.get((e.table, e.key), 0)
        versions[(e.table, e.key)] = e.version


def test_materialize_and_time_travel_detector():
    events = [log(1, 1, 1, "create"), log(2, 1, 2), dump(3, 1, 1)]
    assert materialize(events)[("t", (1,))][1] == 1
    [v] = checks.check_no_time_travel(events)
    assert "seq 3" in v.evidence and "seq 2" in v.evidence and "[1]" in v.evidence
