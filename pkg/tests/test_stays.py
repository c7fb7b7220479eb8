import numpy as np
import pytest
from hypothesis import given, strategies as st

from stkg_activity.ingest import GridIndex, SlotIndex
from stkg_activity.preprocess import TraceBatch, TracePoint
from stkg_activity.stays import (
    MidnightPolicy,
    extract_stay_batch,
    extract_stays,
    occupancy_from_hex,
    occupancy_mask,
    occupancy_to_hex,
)


def tp(k, r, c, uid="u"):
    return TracePoint(uid, SlotIndex.from_linear(k), GridIndex(r, c), ((c + 0.5) * 500, (r + 0.5) * 500))


def test_run_becomes_stay():
    pts = [tp(50, 10, 10), tp(51, 10, 10), tp(52, 10, 10), tp(53, 10, 11)]
    stays, passbys = extract_stays(pts)
    s = stays[0]
    assert (s.grid, s.start, s.end, s.duration_slots) == (GridIndex(10, 10), SlotIndex(0, 50), SlotIndex(0, 53), 3)
    # the trailing single point lasts one slot
    assert len(stays) == 1 and passbys == 1


def test_ten_minutes_is_a_passby():
    stays, passbys = extract_stays([tp(50, 1, 1), tp(51, 2, 2)])
    assert stays == [] and passbys == 2


def test_gap_attributed_to_previous_cell():
    stays, _ = extract_stays([tp(50, 1, 1), tp(80, 2, 2)])
    assert stays[0].duration_slots == 30
    assert stays[0].grid == (1, 1)


def test_gap_cap():
    stays, _ = extract_stays([tp(50, 1, 1), tp(80, 2, 2)], max_gap_slots=5)
    assert stays[0].duration_slots == 5


def test_wrap_overnight():
    pts = [tp(k, 3, 3) for k in range(132, 180)] + [tp(180, 0, 0)]
    (s,), _ = extract_stays(pts, MidnightPolicy.WRAP)
    assert s.occupied_slots() == list(range(0, 36)) + list(range(132, 144))
    assert s.start == SlotIndex(0, 132) and s.end == SlotIndex(1, 36)


def test_split_overnight():
    pts = [tp(k, 3, 3) for k in range(132, 180)] + [tp(180, 0, 0)]
    stays, _ = extract_stays(pts, MidnightPolicy.SPLIT)
    assert [(s.start, s.end) for s in stays] == [(SlotIndex(0, 132), SlotIndex(1, 0)), (SlotIndex(1, 0), SlotIndex(1, 36))]


def test_multi_day_stay_full_occupancy():
    assert occupancy_mask(10, 10 + 144) == (1 << 144) - 1
    assert occupancy_mask(10, 500) == (1 << 144) - 1


def test_hex_msb_is_slot_zero():
    assert occupancy_to_hex(1) == "8" + "0" * 35
    assert occupancy_to_hex(1 << 143) == "0" * 35 + "1"
    m = occupancy_mask(130, 150)
    assert occupancy_from_hex(occupancy_to_hex(m)) == m


def test_empty():
    assert extract_stays([]) == ([], 0)


@st.composite
def traces(draw):
    n = draw(st.integers(1, 60))
    gaps = draw(st.lists(st.integers(1, 40), min_size=n, max_size=n))
    slots = np.cumsum(gaps)
    cells = draw(st.lists(st.sampled_from([(0, 0), (0, 1), (5, 5)]), min_size=n, max_size=n))
    return [tp(int(k), r, c) for k, (r, c) in zip(slots, cells)]


@given(traces(), st.sampled_from(list(MidnightPolicy)), st.one_of(st.none(), st.integers(1, 10)))
def test_stay_invariants(pts, policy, cap):
    batch = extract_stay_batch(TraceBatch.from_points(pts), policy, cap)
    stays = batch.user_stays(0) if batch.n_users else []
    for a, b in zip(stays, stays[1:]):
        assert a.end_linear <= b.start_linear
    for s in stays:
        assert s.duration_slots >= 2
        assert s.duration_slots == s.end_linear - s.start_linear
        covered = {k % 144 for k in range(s.start_linear, s.end_linear)}
        assert set(s.occupied_slots()) == covered
        if policy is MidnightPolicy.SPLIT:
            assert s.start.day == (s.end_linear - 1) // 144
    if cap is None:
        total = pts[-1].when.linear + 1 - pts[0].when.linear
        assert sum(s.duration_slots for s in stays) + int(batch.passby_slots[0]) == total
        # discarded segments last exactly one slot
        assert int(batch.passby_slots[0]) == int(batch.passbys[0])
