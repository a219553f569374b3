from __future__ import annotations

import pytest

from wmcdc.capture import OutputBuffer
from wmcdc.source import SimDatabase


def make_table(db: SimDatabase, name: str = "t", keys=range(1, 11)):
    db.create_table(name, ["c1", "c2", "c3"], ["c1"])
    for k in keys:
        db.put(name, (k,), {"c1": k, "c2": k * 10, "c3": f"r{k}"})
    return db


@pytest.fixture
def db():
    return SimDatabase()


@pytest.fixture
def ten_rows():
    """The 10-row integer-key table used throughout the chunking examples."""
    return make_table(SimDatabase())


@pytest.fixture
def buf():
    return OutputBuffer()
