"""The two comparison methods: grid aggregation and DBSCAN.

Grid (spatial constraint): stays from a running-centroid distance rule,
snapped to a d-sized grid, then greedily merged around the busiest unmarked
cell with its queen neighbours.

DBSCAN (no spatial constraint): trace points are clustered first; stays are
then the runs of consecutive slots inside each cluster.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._jit import njit
from .community import ActivityLocation, Partition, to_activity_locations
from .ingest import GridConfig
from .preprocess import TraceBatch, TracePoint
from .stays import StayBatch, Stay, segment_bounds, stays_from_segments
from .stkg import QUEEN_OFFSETS


@dataclass(frozen=True)
class BaselineConfig:
    d: float = 500.0
    epsilon: float = 1000.0
    min_pts: int = 1
    time_threshold: int = 10

    def __post_init__(self) -> None:
        if not self.d > 0 or not self.epsilon > 0:
            raise ValueError("d and epsilon must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be at least 1")


@dataclass
class BaselineResult:
    """Stays and per-user location assignment of one baseline run."""

    stays: StayBatch
    assignment: list[list[int]]  # per user: location id of each stay
    locations: list[list[ActivityLocation]]


@njit(cache=True)
def _anchor_labels(x, y, user, d):
    """Running-centroid segmentation: a point joins the open segment while
    it lies within ``d`` of the segment's mean position."""
    n = len(x)
    lab = np.zeros(n, dtype=np.int64)
    seg = -1
    sx = 0.0
    sy = 0.0
    cnt = 0
    for i in range(n):
        if i > 0 and user[i] == user[i - 1] and cnt > 0:
            cx = sx / cnt
            cy = sy / cnt
            if np.hypot(x[i] - cx, y[i] - cy) <= d:
                sx += x[i]
                sy += y[i]
                cnt += 1
                lab[i] = seg
                continue
        seg += 1
        sx = x[i]
        sy = y[i]
        cnt = 1
        lab[i] = seg
    return lab


def _segment_stays(
    points: TraceBatch, label: np.ndarray, grid: GridConfig, keep=None, max_gap_slots: int | None = None
) -> tuple[StayBatch, np.ndarray]:
    """Stays from runs of equal ``label``, located at the run's mean position.

    Also returns the label of each kept stay.
    """
    user = np.repeat(np.arange(points.n_users), np.diff(points.offsets))
    first, last, start, end = segment_bounds(user, points.slot, label, max_gap_slots)
    if keep is not None:
        sel = keep[first]
        first, last, start, end = first[sel], last[sel], start[sel], end[sel]
    if len(first):
        cnt = (last - first + 1).astype(float)
        csx = np.r_[0.0, np.cumsum(points.x)]
        csy = np.r_[0.0, np.cumsum(points.y)]
        mx = (csx[last + 1] - csx[first]) / cnt
        my = (csy[last + 1] - csy[first]) / cnt
    else:
        mx = my = np.zeros(0)
    r, c = grid.cell_of(mx, my)
    batch = stays_from_segments(points.uids, user[first], r, c, start, end)
    return batch, label[first][end - start >= 2]


def grid_clusters(cells: Sequence[tuple[int, int]]) -> dict[tuple[int, int], int]:
    """Greedy cell aggregation; returns cell -> cluster index.

    Repeatedly take the unmarked cell holding most stays (ties: smallest
    (r, c)) and merge it with its unmarked queen neighbours that hold stays.
    """
    counts: dict[tuple[int, int], int] = {}
    for g in cells:
        g = (int(g[0]), int(g[1]))
        counts[g] = counts.get(g, 0) + 1
    order = sorted(counts, key=lambda g: (-counts[g], g))
    out: dict[tuple[int, int], int] = {}
    k = 0
    for g in order:
        if g in out:
            continue
        out[g] = k
        for a, b in QUEEN_OFFSETS:
            nb = (g[0] + a, g[1] + b)
            if nb in counts and nb not in out:
                out[nb] = k
        k += 1
    return out


def _locations(stays: StayBatch, cluster_of_stay: np.ndarray, grid: GridConfig) -> tuple[list, list]:
    assignment, locations = [], []
    for u in range(stays.n_users):
        sl = stays.user_slice(u)
        user_stays = stays.user_stays(u)
        locs = to_activity_locations(Partition(cluster_of_stay[sl].tolist()), user_stays, grid)
        loc_of = {}
        for loc in locs:
            for sid in loc.stay_ids:
                loc_of[sid] = loc.id
        assignment.append([loc_of[s.id] for s in user_stays])
        locations.append(locs)
    return assignment, locations


def grid_baseline(points: TraceBatch, cfg: BaselineConfig = BaselineConfig(), grid: GridConfig = GridConfig()) -> BaselineResult:
    bgrid = dataclasses.replace(grid, cell_size=cfg.d)
    user = np.repeat(np.arange(points.n_users), np.diff(points.offsets))
    label = _anchor_labels(points.x, points.y, user, float(cfg.d))
    stays, _ = _segment_stays(points, label, bgrid)
    cluster = np.zeros(len(stays), dtype=np.int64)
    for u in range(stays.n_users):
        sl = stays.user_slice(u)
        cells = list(zip(stays.r[sl].tolist(), stays.c[sl].tolist()))
        of = grid_clusters(cells)
        cluster[sl] = [of[g] for g in cells]
    assignment, locations = _locations(stays, cluster, bgrid)
    return BaselineResult(stays, assignment, locations)


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _dbscan_kernel(x, y, weight, eps, min_pts, bucket_start, bucket_members, bx, by, bucket_keys):
    """DBSCAN over (possibly duplicated) points using an eps-sided bucket index.

    ``weight`` is the multiplicity of each distinct position.  Returns labels
    (-1 = noise) where cluster ids are the union-find roots.
    """
    n = len(x)
    eps2 = eps * eps
    nb_count = np.zeros(n, dtype=np.int64)
    parent = np.arange(n)
    nbuckets = len(bucket_keys)
    # pass 1: neighbourhood sizes
    for i in range(n):
        for da in range(-1, 2):
            for db in range(-1, 2):
                key = (bx[i] + da) * 4294967296 + (by[i] + db)
                b = np.searchsorted(bucket_keys, key)
                if b < nbuckets and bucket_keys[b] == key:
                    for q in range(bucket_start[b], bucket_start[b + 1]):
                        j = bucket_members[q]
                        dx = x[i] - x[j]
                        dy = y[i] - y[j]
                        if dx * dx + dy * dy <= eps2:
                            nb_count[i] += weight[j]
    core = nb_count >= min_pts
    # pass 2: union core points within eps
    for i in range(n):
        if not core[i]:
            continue
        for da in range(-1, 2):
            for db in range(-1, 2):
                key = (bx[i] + da) * 4294967296 + (by[i] + db)
                b = np.searchsorted(bucket_keys, key)
                if b < nbuckets and bucket_keys[b] == key:
                    for q in range(bucket_start[b], bucket_start[b + 1]):
                        j = bucket_members[q]
                        if j <= i or not core[j]:
                            continue
                        ri = _find(parent, i)
                        rj = _find(parent, j)
                        if ri == rj:
                            continue
                        dx = x[i] - x[j]
                        dy = y[i] - y[j]
                        if dx * dx + dy * dy <= eps2:
                            if ri < rj:
                                parent[rj] = ri
                            else:
                                parent[ri] = rj
    labels = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if core[i]:
            labels[i] = _find(parent, i)
    # border points join the cluster of their lowest-index core neighbour
    for i in range(n):
        if core[i]:
            continue
        best = -1
        for da in range(-1, 2):
            for db in range(-1, 2):
                key = (bx[i] + da) * 4294967296 + (by[i] + db)
                b = np.searchsorted(bucket_keys, key)
                if b < nbuckets and bucket_keys[b] == key:
                    for q in range(bucket_start[b], bucket_start[b + 1]):
                        j = bucket_members[q]
                        if core[j] and (best == -1 or j < best):
                            dx = x[i] - x[j]
                            dy = y[i] - y[j]
                            if dx * dx + dy * dy <= eps2:
                                best = j
        if best >= 0:
            labels[i] = labels[best]
    return labels


def dbscan(x: np.ndarray, y: np.ndarray, eps: float, min_pts: int = 1) -> np.ndarray:
    """DBSCAN labels; clusters numbered 0.. by first appearance, noise = -1."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # duplicate positions are common (one tower, many slots); cluster each once
    z, inv, cnt = np.unique(x + 1j * y, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    ux, uy = z.real.copy(), z.imag.copy()
    # buckets slightly wider than eps so rounding never separates an eps-pair by two buckets
    side = eps * (1 + 1e-9)
    bx = np.floor(ux / side).astype(np.int64)
    by = np.floor(uy / side).astype(np.int64)
    key = bx * 4294967296 + by
    order = np.argsort(key, kind="stable")
    bucket_keys, bucket_first = np.unique(key[order], return_index=True)
    bucket_start = np.r_[bucket_first, len(order)].astype(np.int64)
    raw = _dbscan_kernel(ux, uy, cnt.astype(np.int64), float(eps), int(min_pts), bucket_start,
                         order.astype(np.int64), bx, by, bucket_keys)
    lab = raw[inv]
    # renumber clusters by first appearance in input order
    roots, first = np.unique(lab, return_index=True)
    rank = np.empty(len(roots), dtype=np.int64)
    live = roots >= 0
    rank[np.argsort(np.where(live, first, -1), kind="stable")] = np.arange(len(roots)) - int((~live).sum())
    rank[~live] = -1
    return rank[np.searchsorted(roots, lab)]


def dbscan_baseline(points: TraceBatch, cfg: BaselineConfig = BaselineConfig(), grid: GridConfig = GridConfig()) -> BaselineResult:
    label = np.zeros(len(points), dtype=np.int64)
    for u in range(points.n_users):
        lo, hi = points.offsets[u], points.offsets[u + 1]
        label[lo:hi] = dbscan(points.x[lo:hi], points.y[lo:hi], cfg.epsilon, cfg.min_pts)
    # a run is broken by a point of another cluster or by a missing slot
    stays, cluster = _segment_stays(points, label, grid, keep=label >= 0, max_gap_slots=1)
    assignment, locations = _locations(stays, cluster, grid)
    return BaselineResult(stays, assignment, locations)


def _single_user(points: Sequence[TracePoint], result: BaselineResult):
    if not points:
        return [], []
    return result.locations[0], result.stays.user_stays(0)


def spatial_constraint_identify(
    points: Sequence[TracePoint], cfg: BaselineConfig = BaselineConfig(), grid: GridConfig = GridConfig()
) -> tuple[list[ActivityLocation], list[Stay]]:
    points = list(points)
    if not points:
        return [], []
    return _single_user(points, grid_baseline(TraceBatch.from_points(points), cfg, grid))


def dbscan_identify(
    points: Sequence[TracePoint], cfg: BaselineConfig = BaselineConfig(), grid: GridConfig = GridConfig()
) -> tuple[list[ActivityLocation], list[Stay]]:
    points = list(points)
    if not points:
        return [], []
    return _single_user(points, dbscan_baseline(TraceBatch.from_points(points), cfg, grid))
