"""Stay / pass-by segmentation of smoothed trace points.

A run of consecutive trace points in one grid cell is a segment; it lasts
from its first slot to the first slot of the following trace point.  Segments
longer than one slot (i.e. strictly more than 10 minutes) are stays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ingest import SLOTS_PER_DAY, GridIndex, SlotIndex
from .preprocess import TraceBatch, TracePoint

MIN_STAY_SLOTS = 2
FULL_OCCUPANCY = (1 << SLOTS_PER_DAY) - 1


class MidnightPolicy(str, enum.Enum):
    WRAP = "wrap"
    SPLIT = "split"


@dataclass(frozen=True)
class Stay:
    id: int
    uid: str
    grid: GridIndex
    start: SlotIndex
    end: SlotIndex
    duration_slots: int
    occupancy: int  # bit k set <=> time-of-day slot k covered

    @property
    def start_linear(self) -> int:
        return self.start.linear

    @property
    def end_linear(self) -> int:
        return self.end.linear

    def occupied_slots(self) -> list[int]:
        return [k for k in range(SLOTS_PER_DAY) if self.occupancy >> k & 1]


def occupancy_mask(start: int, end: int) -> int:
    """Time-of-day bitmask covered by linear slots [start, end)."""
    length = end - start
    if length >= SLOTS_PER_DAY:
        return FULL_OCCUPANCY
    if length <= 0:
        return 0
    tod = start % SLOTS_PER_DAY
    bits = ((1 << length) - 1) << tod
    return (bits | bits >> SLOTS_PER_DAY) & FULL_OCCUPANCY


def occupancy_matrix(start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Boolean (n, 144) occupancy rows for linear slot ranges [start, end)."""
    length = (end - start)[:, None]
    rel = (np.arange(SLOTS_PER_DAY)[None, :] - (start % SLOTS_PER_DAY)[:, None]) % SLOTS_PER_DAY
    return rel < length


def occupancy_to_hex(occ: int) -> str:
    """36 hex digits; the most significant bit is slot 0."""
    rev = int(format(occ, f"0{SLOTS_PER_DAY}b")[::-1], 2)
    return format(rev, "036x")


def occupancy_from_hex(text: str) -> int:
    bits = format(int(text, 16), f"0{SLOTS_PER_DAY}b")
    return int(bits[::-1], 2)


def occupancy_row_to_int(row: np.ndarray) -> int:
    # packbits pads on the right; 144 is a multiple of 8 so no padding occurs
    return int.from_bytes(np.packbits(row[::-1].astype(np.uint8)).tobytes(), "big")


@dataclass
class StayBatch:
    """Columnar stays for many users.

    ``start``/``end`` are linear slots (end exclusive); ``occ`` is a boolean
    (n, 144) matrix.  Per-user stay ids are positions within the user block.
    """

    uids: list[str]
    offsets: np.ndarray
    r: np.ndarray
    c: np.ndarray
    start: np.ndarray
    end: np.ndarray
    occ: np.ndarray
    passbys: np.ndarray  # per user
    passby_slots: np.ndarray  # per user
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.start)

    @property
    def n_users(self) -> int:
        return len(self.uids)

    def user_slice(self, u: int) -> slice:
        return slice(int(self.offsets[u]), int(self.offsets[u + 1]))

    def user_stays(self, u: int) -> list[Stay]:
        if u not in self._cache:
            self._cache[u] = self._build_stays(u)
        return list(self._cache[u])

    def _build_stays(self, u: int) -> list[Stay]:
        sl = self.user_slice(u)
        uid = self.uids[u]
        out = []
        for i, (r, c, s, e, row) in enumerate(
            zip(self.r[sl], self.c[sl], self.start[sl], self.end[sl], self.occ[sl])
        ):
            out.append(
                Stay(
                    id=i,
                    uid=uid,
                    grid=GridIndex(int(r), int(c)),
                    start=SlotIndex.from_linear(s),
                    end=SlotIndex.from_linear(e),
                    duration_slots=int(e - s),
                    occupancy=occupancy_row_to_int(row),
                )
            )
        return out

    @classmethod
    def from_stays(cls, stays: Sequence[Stay]) -> "StayBatch":
        uids: list[str] = []
        starts: list[int] = []
        for i, s in enumerate(stays):
            if not uids or uids[-1] != s.uid:
                uids.append(s.uid)
                starts.append(i)
        starts.append(len(stays))
        occ = np.zeros((len(stays), SLOTS_PER_DAY), dtype=bool)
        for i, s in enumerate(stays):
            occ[i] = [(s.occupancy >> k) & 1 for k in range(SLOTS_PER_DAY)]
        nu = len(uids)
        return cls(
            uids=uids,
            offsets=np.asarray(starts, dtype=np.int64),
            r=np.asarray([s.grid.r for s in stays], dtype=np.int64),
            c=np.asarray([s.grid.c for s in stays], dtype=np.int64),
            start=np.asarray([s.start.linear for s in stays], dtype=np.int64),
            end=np.asarray([s.end.linear for s in stays], dtype=np.int64),
            occ=occ,
            passbys=np.zeros(nu, dtype=np.int64),
            passby_slots=np.zeros(nu, dtype=np.int64),
        )


def segment_bounds(user, slot, key, max_gap_slots: int | None = None):
    """Runs of consecutive points sharing ``user`` and ``key``.

    Returns (first, last, start, end): index of each run's first and last
    point, and its slot range [start, end) where ``end`` is the first slot of
    the user's next point (gap attribution), optionally capped at
    ``max_gap_slots`` after the run's last point.
    """
    n = len(slot)
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, z
    same_user = user[1:] == user[:-1]
    same = same_user & (key[1:] == key[:-1])
    if max_gap_slots is not None:
        same &= (slot[1:] - slot[:-1]) <= max_gap_slots
    first = np.flatnonzero(np.r_[True, ~same])
    last = np.r_[first[1:] - 1, n - 1]
    has_next = np.r_[same_user, False][last]
    nxt = slot[np.minimum(last + 1, n - 1)]
    end = np.where(has_next, nxt, slot[last] + 1)
    if max_gap_slots is not None:
        end = np.minimum(end, slot[last] + max_gap_slots)
    return first, last, slot[first], end


def cell_key(r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Injective int64 key for (r, c) pairs with |r|, |c| < 2**31."""
    return (np.asarray(r, dtype=np.int64) << 32) + (np.asarray(c, dtype=np.int64) + (1 << 31))


def segment_arrays(user, slot, r, c, max_gap_slots: int | None = None):
    """Merge consecutive same-cell points; returns (user, r, c, start, end)."""
    first, _, start, end = segment_bounds(user, slot, cell_key(r, c), max_gap_slots)
    return user[first], r[first], c[first], start, end


def split_at_midnight(user, r, c, start, end):
    """Cut [start, end) ranges at day boundaries."""
    first_day = start // SLOTS_PER_DAY
    last_day = (end - 1) // SLOTS_PER_DAY
    npieces = last_day - first_day + 1
    rep = np.repeat(np.arange(len(start)), npieces)
    off = np.r_[0, np.cumsum(npieces)[:-1]]
    day = first_day[rep] + (np.arange(len(rep)) - off[rep])
    s = np.maximum(start[rep], day * SLOTS_PER_DAY)
    e = np.minimum(end[rep], (day + 1) * SLOTS_PER_DAY)
    return user[rep], r[rep], c[rep], s, e


def stays_from_segments(uids: list[str], su, sr, sc, ss, se) -> StayBatch:
    """Keep segments longer than one slot as stays; count the rest as pass-bys."""
    dur = se - ss
    is_stay = dur >= MIN_STAY_SLOTS
    nu = len(uids)
    passbys = np.bincount(su[~is_stay], minlength=nu).astype(np.int64)
    passby_slots = np.bincount(su[~is_stay], weights=dur[~is_stay], minlength=nu).astype(np.int64)
    su, sr, sc, ss, se = su[is_stay], sr[is_stay], sc[is_stay], ss[is_stay], se[is_stay]
    return StayBatch(
        uids=list(uids),
        offsets=np.searchsorted(su, np.arange(nu + 1)).astype(np.int64),
        r=sr,
        c=sc,
        start=ss,
        end=se,
        occ=occupancy_matrix(ss, se),
        passbys=passbys,
        passby_slots=passby_slots,
    )


def extract_stay_batch(
    points: TraceBatch,
    policy: MidnightPolicy = MidnightPolicy.WRAP,
    max_gap_slots: int | None = None,
) -> StayBatch:
    user = np.repeat(np.arange(points.n_users), np.diff(points.offsets))
    su, sr, sc, ss, se = segment_arrays(user, points.slot, points.r, points.c, max_gap_slots)
    if MidnightPolicy(policy) is MidnightPolicy.SPLIT:
        su, sr, sc, ss, se = split_at_midnight(su, sr, sc, ss, se)
    return stays_from_segments(points.uids, su, sr, sc, ss, se)


def extract_stays(
    points: Sequence[TracePoint],
    policy: MidnightPolicy = MidnightPolicy.WRAP,
    max_gap_slots: int | None = None,
) -> tuple[list[Stay], int]:
    """Stays of one user's time-sorted trace points, plus the pass-by count."""
    points = list(points)
    if not points:
        return [], 0
    batch = extract_stay_batch(TraceBatch.from_points(points), policy, max_gap_slots)
    return batch.user_stays(0), int(batch.passbys[0])
