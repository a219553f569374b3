"""Seeded write workloads, their file format, and the brute-force oracle.

Workload files hold one operation per line::

    put t [1] {"c1":1,"c2":"a","c3":"x"}
    del t [1]

Lines starting with ``#`` are comments.  A ``# capture`` line separates
initial rows (loaded before capture starts) from the concurrent operations.
"""

from __future__ import annotations

import json
import random
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import Key, Row


@dataclass(frozen=True)
class Op:
    kind: str  # put | del
    table: str
    key: Key
    row: Optional[Row] = None

    def to_line(self) -> str:
        key = json.dumps(list(self.key), separators=(",", ":"))
        if self.kind == "del":
            return f"del {self.table} {key}"
        return f"put {self.table} {key} {json.dumps(self.row, separators=(',', ':'))}"

    @classmethod
    def from_line(cls, line: str) -> "Op":
        parts = line.split(" ", 3)
        if parts[0] == "put" and len(parts) == 4:
            return cls("put", parts[1], tuple(json.loads(parts[2])), json.loads(parts[3]))
        if parts[0] == "del" and len(parts) == 3:
            return cls("del", parts[1], tuple(json.loads(parts[2])))
        raise ValueError(f"bad workload line: {line!r}")


@dataclass
class TableSpec:
    name: str
    columns: list
    pk: list


@dataclass
class Workload:
    tables: list  # TableSpec
    initial: list = field(default_factory=list)  # Op
    ops: list = field(default_factory=list)  # Op

    def all_ops(self):
        yield from self.initial
        yield from self.ops


def table_specs(n_tables: int, pk_arity: int = 1) -> list[TableSpec]:
    pk = ["id"] if pk_arity == 1 else ["id", "region"]
    return [TableSpec(f"t{i}", pk + ["qty", "label", "flag"], pk) for i in range(n_tables)]


REGIONS = ("eu", "na", "sa")


def _row(spec: TableSpec, key: Key, rng: random.Random) -> Row:
    row = dict(zip(spec.pk, key))
    row["qty"] = rng.randrange(1000)
    row["label"] = rng.choice(("a", "b", "c", "d")) + str(rng.randrange(100))
    row["flag"] = rng.random() < 0.5
    return row


def _key(spec: TableSpec, n: int) -> Key:
    if len(spec.pk) == 1:
        return (n,)
    return (n // len(REGIONS), REGIONS[n % len(REGIONS)])


def generate_workload(seed: int, n_tables: int = 2, initial_rows: int = 100, ops: int = 500,
                      op_mix=(0.3, 0.5, 0.2), pk_arity: int = 1, recreate: float = 0.1) -> Workload:
    """Seeded put/delete sequence over ``n_tables`` tables.

    ``op_mix`` weights create, update and delete.  Deletes and updates only
    target live keys; a create revives a deleted key with probability
    ``recreate``.  If some table would receive no operations the sequence is
    regenerated with a derived seed.
    """
    specs = table_specs(n_tables, pk_arity)
    attempt = 0
    while True:
        w = _generate(seed if attempt == 0 else (seed, attempt), specs, initial_rows, ops, op_mix, recreate)
        touched = {op.table for op in w.ops}
        if ops < n_tables or len(touched) == n_tables:
            return w
        attempt += 1


def _generate(seed, specs, initial_rows, ops, op_mix, recreate) -> Workload:
    rng = random.Random(repr(seed))
    live = {s.name: [] for s in specs}
    pos = {s.name: {} for s in specs}
    dead = {s.name: [] for s in specs}
    next_n = {s.name: 0 for s in specs}
    w = Workload(specs)

    def add_live(name, key):
        pos[name][key] = len(live[name])
        live[name].append(key)

    def remove_live(name, key):
        i = pos[name].pop(key)
        last = live[name].pop()
        if last != key:
            live[name][i] = last
            pos[name][last] = i

    for s in specs:
        for _ in range(initial_rows):
            key = _key(s, next_n[s.name])
            next_n[s.name] += 1
            add_live(s.name, key)
            w.initial.append(Op("put", s.name, key, _row(s, key, rng)))

    kinds = ("create", "update", "delete")
    for _ in range(ops):
        s = rng.choice(specs)
        kind = rng.choices(kinds, weights=op_mix)[0]
        if not live[s.name]:
            kind = "create"
        if kind == "create":
            if dead[s.name] and rng.random() < recreate:
                key = dead[s.name].pop(rng.randrange(len(dead[s.name])))
            else:
                key = _key(s, next_n[s.name])
                next_n[s.name] += 1
            add_live(s.name, key)
            w.ops.append(Op("put", s.name, key, _row(s, key, rng)))
        elif kind == "update":
            key = rng.choice(live[s.name])
            w.ops.append(Op("put", s.name, key, _row(s, key, rng)))
        else:
            key = rng.choice(live[s.name])
            remove_live(s.name, key)
            dead[s.name].append(key)
            w.ops.append(Op("del", s.name, key))
    return w


def oracle_final_state(ops: Iterable[Op]) -> dict:
    """Apply operations to an empty map: ``{(table, key): row}``."""
    state = {}
    for op in ops:
        k = (op.table, tuple(op.key))
        if op.kind == "put":
            state[k] = dict(op.row)
        else:
            state.pop(k, None)
    return state


def writer_of(op: Op, writers: int) -> int:
    """Stable key -> writer assignment, so per-key operation order survives interleaving."""
    return zlib.crc32(f"{op.table}|{op.key!r}".encode()) % writers


def apply_op(db, op: Op):
    if op.kind == "put":
        return db.put(op.table, op.key, op.row)
    return db.delete(op.table, op.key)


def write_workload(path, w: Workload):
    with open(path, "w", encoding="utf-8") as fh:
        for s in w.tables:
            fh.write(f"# table {s.name} columns={','.join(s.columns)} pk={','.join(s.pk)}\n")
        for op in w.initial:
            fh.write(op.to_line() + "\n")
        fh.write("# capture\n")
        for op in w.ops:
            fh.write(op.to_line() + "\n")


def read_workload(path) -> Workload:
    w = Workload([])
    target = w.initial
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                words = line[1:].split()
                if words == ["capture"]:
                    target = w.ops
                elif words and words[0] == "table" and len(words) == 4:
                    cols = words[2].removeprefix("columns=").split(",")
                    pk = words[3].removeprefix("pk=").split(",")
                    w.tables.append(TableSpec(words[1], cols, pk))
                continue
            target.append(Op.from_line(line))
    return w
