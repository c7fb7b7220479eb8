"""Metrics for identified activity locations.

Spatial quality is the cluster radius; temporal stability is the variance of
daily start/end times at each user's primary daytime location.  With
synthetic ground truth, partitions of stays are also scored by ARI.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .community import ActivityLocation
from .ingest import SLOTS_PER_DAY, GridConfig, SlotIndex
from .stays import Stay

DAYTIME_SLOTS = (36, 108)  # 06:00 <= t < 18:00
RADIUS_THRESHOLD = 1000.0
SLOTS_PER_HOUR = 6


@dataclass(frozen=True)
class Activity:
    """Same-location run of stays restricted to one day; ``end_slot`` may be 144."""

    uid: str
    location_id: int
    day: int
    start_slot: int
    end_slot: int

    @property
    def start(self) -> SlotIndex:
        return SlotIndex(self.day, self.start_slot)

    @property
    def end(self) -> SlotIndex:
        return SlotIndex(self.day, self.end_slot)


def cluster_radius(loc: ActivityLocation, config: GridConfig = GridConfig()) -> float:
    """Largest distance from the centroid of member stays to a member cell center.

    The centroid is the unweighted mean over stays, as stored on ``loc``.
    """
    if not loc.cells:
        raise ValueError("location has no stays")
    cells = np.asarray(loc.cells)
    x, y = config.cell_center(cells[:, 0], cells[:, 1])
    return float(np.max(np.hypot(np.asarray(x) - loc.centroid[0], np.asarray(y) - loc.centroid[1])))


def build_activities(stays: Sequence[Stay], assignment: Sequence[int]) -> list[Activity]:
    if len(stays) != len(assignment):
        raise ValueError("assignment must cover every stay")
    order = sorted(range(len(stays)), key=lambda i: (stays[i].start_linear, stays[i].id))
    runs: list[list[int]] = []  # [location, start, end]
    for i in order:
        s, loc = stays[i], int(assignment[i])
        if runs and runs[-1][0] == loc:
            runs[-1][2] = max(runs[-1][2], s.end_linear)
        else:
            runs.append([loc, s.start_linear, s.end_linear])
    uid = stays[0].uid if stays else ""
    out = []
    for loc, start, end in runs:
        for day in range(start // SLOTS_PER_DAY, (end - 1) // SLOTS_PER_DAY + 1):
            base = day * SLOTS_PER_DAY
            out.append(Activity(uid, loc, day, max(start, base) - base, min(end, base + SLOTS_PER_DAY) - base))
    return out


def _weekday(day: int, config: GridConfig) -> bool:
    return config.is_weekday(day)


def primary_daytime_location(activities: Sequence[Activity], config: GridConfig = GridConfig()) -> int | None:
    """Location with the most weekday daytime overlap; ``None`` if there is none."""
    lo, hi = DAYTIME_SLOTS
    total: dict[int, int] = {}
    for a in activities:
        if not _weekday(a.day, config):
            continue
        ov = min(a.end_slot, hi) - max(a.start_slot, lo)
        if ov > 0:
            total[a.location_id] = total.get(a.location_id, 0) + ov
    if not total:
        return None
    return min(total, key=lambda k: (-total[k], k))


def _daily_bounds(activities: Sequence[Activity], location_id: int, config: GridConfig) -> dict[int, list[int]]:
    days: dict[int, list[int]] = {}
    for a in activities:
        if a.location_id != location_id or not _weekday(a.day, config):
            continue
        b = days.setdefault(a.day, [a.start_slot, a.end_slot])
        b[0] = min(b[0], a.start_slot)
        b[1] = max(b[1], a.end_slot)
    return days


def time_variance(
    activities: Sequence[Activity], location_id: int, config: GridConfig = GridConfig()
) -> tuple[float, float]:
    """Population variances (hours squared) of daily earliest start and latest end."""
    days = _daily_bounds(activities, location_id, config)
    if not days:
        return 0.0, 0.0
    b = np.asarray(list(days.values()), dtype=float) / SLOTS_PER_HOUR
    return float(np.var(b[:, 0])), float(np.var(b[:, 1]))


def observable_days(activities: Sequence[Activity], location_id: int, config: GridConfig = GridConfig()) -> int:
    return len(_daily_bounds(activities, location_id, config))


def _comb2(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(x * (x - 1) / 2))


def adjusted_rand_index(predicted: Sequence, truth: Sequence) -> float:
    """ARI of two labelings of the same items; 1.0 when both are trivially equal."""
    if len(predicted) != len(truth):
        raise ValueError("labelings must cover the same items")
    n = len(predicted)
    if n == 0:
        return 1.0
    _, a = np.unique(np.asarray(predicted, dtype=object).astype(str), return_inverse=True)
    _, b = np.unique(np.asarray(truth, dtype=object).astype(str), return_inverse=True)
    a, b = a.ravel(), b.ravel()
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    index = _comb2(table)
    sa, sb = _comb2(table.sum(axis=1)), _comb2(table.sum(axis=0))
    expected = sa * sb / (n * (n - 1) / 2) if n > 1 else 0.0
    maximum = (sa + sb) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def project_assignment(
    ref_start: np.ndarray, ref_end: np.ndarray, start: np.ndarray, end: np.ndarray, assignment: Sequence[int]
) -> np.ndarray:
    """Location of each reference interval under another set of located intervals.

    Each reference stay [ref_start, ref_end) takes the location of the
    interval it overlaps longest (ties: smaller location id); -1 if none.
    Both interval sets must be time-sorted and internally disjoint.
    """
    ref_start, ref_end = np.asarray(ref_start), np.asarray(ref_end)
    start, end = np.asarray(start), np.asarray(end)
    loc = np.asarray(assignment, dtype=np.int64)
    out = np.full(len(ref_start), -1, dtype=np.int64)
    lo = np.searchsorted(end, ref_start, side="right")
    hi = np.searchsorted(start, ref_end, side="left")
    for i in range(len(ref_start)):
        if hi[i] <= lo[i]:
            continue
        j = np.arange(lo[i], hi[i])
        ov = np.minimum(end[j], ref_end[i]) - np.maximum(start[j], ref_start[i])
        best = ov.max()
        if best > 0:
            out[i] = loc[j][ov == best].min()
    return out


def dominant_location(assignment: Sequence[int], weight: Sequence[float], labels: Sequence[str], label: str) -> int | None:
    """Location holding the most weight among items whose true label is ``label``."""
    tot: dict[int, float] = {}
    for loc, w, lab in zip(assignment, weight, labels):
        if lab == label and loc >= 0:
            tot[int(loc)] = tot.get(int(loc), 0) + w
    if not tot:
        return None
    return min(tot, key=lambda k: (-tot[k], k))


def places_separated(
    assignment: Sequence[int], weight: Sequence[float], labels: Sequence[str], a: str, b: str
) -> bool | None:
    """Whether the dominant locations of true places ``a`` and ``b`` differ."""
    la = dominant_location(assignment, weight, labels, a)
    lb = dominant_location(assignment, weight, labels, b)
    if la is None or lb is None:
        return None
    return la != lb


@dataclass
class UserMetrics:
    uid: str
    method: str
    radii: list[float]
    primary_location: int | None
    primary_radius: float | None
    var_start_h2: float | None
    var_end_h2: float | None
    observable_days: int | None
    ari: float | None = None
    home_work_separated: bool | None = None

    @property
    def max_radius(self) -> float | None:
        return max(self.radii) if self.radii else None

    def to_json(self) -> dict:
        return {
            "uid": self.uid,
            "method": self.method,
            "primary_location": self.primary_location,
            "var_start_h2": self.var_start_h2,
            "var_end_h2": self.var_end_h2,
            "observable_days": self.observable_days,
            "max_radius_m": self.max_radius,
            "ari": self.ari,
            "home_work_separated": self.home_work_separated,
        }


def evaluate_user(
    method: str,
    uid: str,
    stays: Sequence[Stay],
    assignment: Sequence[int],
    locations: Sequence[ActivityLocation],
    config: GridConfig = GridConfig(),
) -> UserMetrics:
    """Truth-free metrics of one user's result."""
    radii = [cluster_radius(loc, config) for loc in locations]
    acts = build_activities(stays, assignment)
    primary = primary_daytime_location(acts, config)
    m = UserMetrics(uid, method, radii, primary, None, None, None, None)
    if primary is not None:
        m.primary_radius = radii[primary]
        m.var_start_h2, m.var_end_h2 = time_variance(acts, primary, config)
        m.observable_days = observable_days(acts, primary, config)
    return m


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else math.nan


@dataclass
class MetricsReport:
    """Aggregates per method, in a fixed row order."""

    threshold: float = RADIUS_THRESHOLD
    rows: list[tuple[str, str, float]] = field(default_factory=list)

    @classmethod
    def from_users(cls, users: Sequence[UserMetrics], threshold: float = RADIUS_THRESHOLD) -> "MetricsReport":
        rep = cls(threshold)
        by_method: dict[str, list[UserMetrics]] = {}
        for u in users:
            by_method.setdefault(u.method, []).append(u)
        for method in sorted(by_method):
            ms = by_method[method]
            radii = np.asarray([r for u in ms for r in u.radii], dtype=float)
            prim = np.asarray([u.primary_radius for u in ms if u.primary_radius is not None], dtype=float)
            stats = {
                "users": len(ms),
                "locations": len(radii),
                "radius_mean_m": float(radii.mean()) if len(radii) else math.nan,
                "radius_max_m": float(radii.max()) if len(radii) else math.nan,
                "share_radius_le_threshold": float(np.mean(radii <= threshold)) if len(radii) else math.nan,
                "users_with_primary": len(prim),
                "primary_radius_mean_m": float(prim.mean()) if len(prim) else math.nan,
                "primary_share_radius_le_threshold": float(np.mean(prim <= threshold)) if len(prim) else math.nan,
                "var_start_h2_mean": _mean(u.var_start_h2 for u in ms),
                "var_end_h2_mean": _mean(u.var_end_h2 for u in ms),
                "observable_days_mean": _mean(u.observable_days for u in ms),
                "ari_mean": _mean(u.ari for u in ms),
                "home_work_separated_share": _mean(
                    float(u.home_work_separated) for u in ms if u.home_work_separated is not None
                ),
            }
            rep.rows.extend((method, k, float(v)) for k, v in stats.items())
        return rep

    def get(self, method: str, metric: str) -> float:
        for m, k, v in self.rows:
            if m == method and k == metric:
                return v
        raise KeyError((method, metric))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "metric", "value"])
        for m, k, v in self.rows:
            w.writerow([m, k, repr(v)])
        return buf.getvalue()
