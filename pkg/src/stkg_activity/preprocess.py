"""Oscillation filtering and 10-minute smoothing of raw sighting records.

Both stages run on columnar batches covering many users at once; the
per-user functions ``filter_oscillations`` and ``smooth_to_trace_points``
wrap the same array code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._jit import njit
from .ingest import (
    SLOT_SECONDS,
    GridConfig,
    GridIndex,
    RawRecord,
    RecordBatch,
    SlotIndex,
)


@dataclass(frozen=True)
class OscillationParams:
    max_speed: float = 33.3
    pingpong_window: float = 600.0
    ratio_band: tuple[float, float] = (0.67, 1.5)
    return_radius: float = 200.0

    def __post_init__(self) -> None:
        lo, hi = self.ratio_band
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if not 0 < lo < 1 < hi:
            raise ValueError("ratio_band must satisfy 0 < lo < 1 < hi")


@dataclass(frozen=True)
class TracePoint:
    uid: str
    when: SlotIndex
    grid: GridIndex
    pos: tuple[float, float]


@dataclass
class TraceBatch:
    """Columnar trace points, one row per occupied (user, slot).

    ``slot`` is the linear slot index ``day * 144 + slot``.
    """

    uids: list[str]
    offsets: np.ndarray
    slot: np.ndarray
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.slot)

    @property
    def n_users(self) -> int:
        return len(self.uids)

    def user_points(self, u: int) -> list[TracePoint]:
        lo, hi = self.offsets[u], self.offsets[u + 1]
        uid = self.uids[u]
        return [
            TracePoint(uid, SlotIndex.from_linear(k), GridIndex(int(r), int(c)), (float(x), float(y)))
            for k, r, c, x, y in zip(
                self.slot[lo:hi], self.r[lo:hi], self.c[lo:hi], self.x[lo:hi], self.y[lo:hi]
            )
        ]

    @classmethod
    def from_points(cls, points: Sequence[TracePoint]) -> "TraceBatch":
        """Batch of one user's (or several uid-sorted users') points."""
        uids: list[str] = []
        starts: list[int] = []
        for i, p in enumerate(points):
            if not uids or uids[-1] != p.uid:
                uids.append(p.uid)
                starts.append(i)
        starts.append(len(points))
        return cls(
            uids=uids,
            offsets=np.asarray(starts, dtype=np.int64),
            slot=np.asarray([p.when.day * 144 + p.when.slot for p in points], dtype=np.int64),
            x=np.asarray([p.pos[0] for p in points], dtype=float),
            y=np.asarray([p.pos[1] for p in points], dtype=float),
            r=np.asarray([p.grid.r for p in points], dtype=np.int64),
            c=np.asarray([p.grid.c for p in points], dtype=np.int64),
        )


def _same_user_next(offsets: np.ndarray, n: int) -> np.ndarray:
    """Boolean mask: row i has a successor of the same user."""
    has_next = np.ones(n, dtype=bool)
    ends = offsets[1:] - 1
    has_next[ends[ends >= 0]] = False
    if n:
        has_next[-1] = False
    return has_next


@njit(cache=True)
def _candidates_kernel(t, x, y, has_prev, has_next, max_speed, window, lo, hi, return_radius):
    n = len(t)
    cand = np.zeros(n, dtype=np.bool_)
    for i in range(1, n - 1):
        if not (has_prev[i] and has_next[i]):
            continue
        p, q = i - 1, i + 1
        if t[q] - t[p] > window or np.hypot(x[q] - x[p], y[q] - y[p]) > return_radius:
            continue
        d1 = np.hypot(x[i] - x[p], y[i] - y[p])
        d2 = np.hypot(x[q] - x[i], y[q] - y[i])
        in_band = d1 > 0 and d2 > 0 and lo <= d1 / d2 <= hi
        s1 = d1 / (t[i] - t[p]) if d1 > 0 else 0.0
        s2 = d2 / (t[q] - t[i]) if d2 > 0 else 0.0
        cand[i] = in_band or s1 > max_speed or s2 > max_speed
    return cand


def oscillation_candidates(t, x, y, has_prev, has_next, params: OscillationParams) -> np.ndarray:
    """Rows matching the A-B-A ping-pong rule on the current sequence."""
    lo, hi = params.ratio_band
    return _candidates_kernel(
        np.asarray(t, dtype=np.int64), np.asarray(x, dtype=float), np.asarray(y, dtype=float),
        np.asarray(has_prev, dtype=np.bool_), np.asarray(has_next, dtype=np.bool_),
        float(params.max_speed), float(params.pingpong_window), float(lo), float(hi), float(params.return_radius),
    )


def oscillation_keep_mask(t, x, y, offsets, params: OscillationParams) -> np.ndarray:
    """Iterate the ping-pong rule to a fixed point; returns rows kept.

    Within one pass, runs of adjacent candidates lose every other member
    (starting with the first) so that each removed row is judged against
    neighbours that survive the pass.
    """
    n = len(t)
    keep = np.ones(n, dtype=bool)
    user = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    while True:
        idx = np.flatnonzero(keep)
        if len(idx) < 3:
            break
        uu = user[idx]
        has_prev = np.r_[False, uu[1:] == uu[:-1]]
        has_next = np.r_[uu[:-1] == uu[1:], False]
        cand = oscillation_candidates(t[idx], x[idx], y[idx], has_prev, has_next, params)
        if not cand.any():
            break
        # position of each candidate inside its run of consecutive candidates
        run_start = cand & ~np.r_[False, cand[:-1]]
        run_id = np.cumsum(run_start)
        first = np.flatnonzero(run_start)
        pos = np.arange(len(cand)) - first[np.maximum(run_id - 1, 0)]
        drop = cand & (pos % 2 == 0)
        keep[idx[drop]] = False
    return keep


def filter_batch(batch: RecordBatch, params: OscillationParams) -> tuple[RecordBatch, int]:
    keep = oscillation_keep_mask(batch.t, batch.x, batch.y, batch.offsets, params)
    user = batch.user_index()[keep]
    offsets = np.searchsorted(user, np.arange(batch.n_users + 1)).astype(np.int64)
    out = RecordBatch(
        uids=list(batch.uids),
        offsets=offsets,
        t=batch.t[keep],
        lon=batch.lon[keep],
        lat=batch.lat[keep],
        x=batch.x[keep],
        y=batch.y[keep],
        skipped=batch.skipped,
    )
    return out, int((~keep).sum())


def smooth_arrays(t, x, y, offsets, config: GridConfig):
    """Duration-weighted mean position per occupied (user, slot).

    Returns (user, linear_slot, x, y, weight_seconds) arrays, sorted by user
    then slot.
    """
    n = len(t)
    if n == 0:
        e = np.zeros(0)
        ei = np.zeros(0, dtype=np.int64)
        return ei, ei, e, e, e
    user = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    has_next = _same_user_next(offsets, n)
    slot0 = t // SLOT_SECONDS
    end = np.where(has_next, np.r_[t[1:], 0], (slot0 + 1) * SLOT_SECONDS)
    live = end > t
    t0, end, slot0, src = t[live], end[live], slot0[live], np.flatnonzero(live)
    slot1 = (end - 1) // SLOT_SECONDS
    npieces = slot1 - slot0 + 1
    rep = np.repeat(np.arange(len(t0)), npieces)
    piece_off = np.r_[0, np.cumsum(npieces)[:-1]]
    slot = slot0[rep] + (np.arange(len(rep)) - piece_off[rep])
    w = (np.minimum(end[rep], (slot + 1) * SLOT_SECONDS) - np.maximum(t0[rep], slot * SLOT_SECONDS)).astype(float)
    pu = user[src[rep]]
    px = x[src[rep]]
    py = y[src[rep]]
    if len(slot) == 0:
        e = np.zeros(0)
        ei = np.zeros(0, dtype=np.int64)
        return ei, ei, e, e, e
    brk = np.r_[True, (pu[1:] != pu[:-1]) | (slot[1:] != slot[:-1])]
    starts = np.flatnonzero(brk)
    wsum = np.add.reduceat(w, starts)
    mx = np.add.reduceat(w * px, starts) / wsum
    my = np.add.reduceat(w * py, starts) / wsum
    return pu[starts], slot[starts], mx, my, wsum


def smooth_batch(batch: RecordBatch, config: GridConfig) -> TraceBatch:
    user, slot, x, y, _ = smooth_arrays(batch.t, batch.x, batch.y, batch.offsets, config)
    r, c = config.cell_of(x, y)
    offsets = np.searchsorted(user, np.arange(batch.n_users + 1)).astype(np.int64)
    return TraceBatch(list(batch.uids), offsets, slot.astype(np.int64), x, y, r, c)


def _local_xy(records: Sequence[RawRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lon = np.asarray([r.lon for r in records], dtype=float)
    lat = np.asarray([r.lat for r in records], dtype=float)
    t = np.asarray([r.timestamp for r in records], dtype=np.int64)
    local = GridConfig(origin_lon=float(lon[0]), origin_lat=float(lat[0]))
    x, y = local.to_local(lon, lat)
    return t, x, y


def filter_oscillations(records: Sequence[RawRecord], params: OscillationParams = OscillationParams()) -> list[RawRecord]:
    """Drop ping-pong records from one user's time-sorted sequence."""
    records = list(records)
    if len(records) < 3:
        return records
    t, x, y = _local_xy(records)
    keep = oscillation_keep_mask(t, x, y, np.array([0, len(records)]), params)
    return [r for r, k in zip(records, keep) if k]


def smooth_to_trace_points(records: Sequence[RawRecord], config: GridConfig) -> list[TracePoint]:
    records = list(records)
    if not records:
        return []
    t = np.asarray([r.timestamp for r in records], dtype=np.int64)
    x, y = config.to_local([r.lon for r in records], [r.lat for r in records])
    _, slot, mx, my, _ = smooth_arrays(t, x, y, np.array([0, len(records)]), config)
    rr, cc = config.cell_of(mx, my)
    uid = records[0].uid
    return [
        TracePoint(uid, SlotIndex.from_linear(k), GridIndex(int(r), int(c)), (float(px), float(py)))
        for k, r, c, px, py in zip(slot, rr, cc, mx, my)
    ]
