from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stkg_activity.ingest import GridIndex, SlotIndex
from stkg_activity.stays import Stay, occupancy_mask

settings.register_profile("default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def make_stay(sid, r, c, start, end, uid="u"):
    """Stay over linear slots [start, end) in cell (r, c)."""
    return Stay(
        id=sid,
        uid=uid,
        grid=GridIndex(r, c),
        start=SlotIndex.from_linear(start),
        end=SlotIndex.from_linear(end),
        duration_slots=end - start,
        occupancy=occupancy_mask(start, end),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
