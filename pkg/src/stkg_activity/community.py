"""Spatiotemporal graph fusion, modularity, and Fast Unfolding (Louvain).

Conventions: ``A_ij`` is symmetric; a self-loop of weight ``w`` contributes
``A_ii = 2w`` so that ``k_i = sum_j A_ij`` counts it twice and
``2m = sum_i k_i``.  With this convention collapsing a community into a
super-node with a self-loop equal to its internal weight preserves Q.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ingest import GridConfig
from .stays import Stay
from ._jit import njit
from .stkg import SpatialGraph, TemporalGraph

TOLERANCE = 1e-10


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


@dataclass
class WeightedGraph:
    """Symmetric CSR adjacency (both directions stored) plus self-loop weights."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    loops: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @classmethod
    def from_coo(cls, n: int, rows, cols, vals, loops=None) -> "WeightedGraph":
        """Build from one entry per unordered pair (i != j); duplicates add up."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if np.any(vals < 0):
            raise ValueError("edge weights must be non-negative")
        r = np.r_[rows, cols]
        c = np.r_[cols, rows]
        v = np.r_[vals, vals]
        key = r * n + c
        uniq, inv = np.unique(key, return_inverse=True)
        w = np.bincount(inv, weights=v, minlength=len(uniq)) if len(uniq) else np.zeros(0)
        ur, uc = np.divmod(uniq, n) if n else (uniq, uniq)
        indptr = np.searchsorted(ur, np.arange(n + 1)).astype(np.int64)
        lp = np.zeros(n) if loops is None else np.asarray(loops, dtype=np.float64).copy()
        return cls(indptr, uc.astype(np.int64), w, lp)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, float]]) -> "WeightedGraph":
        loops = np.zeros(n)
        rows, cols, vals = [], [], []
        for i, j, w in edges:
            if w < 0:
                raise ValueError("edge weights must be non-negative")
            if i == j:
                loops[i] += w
            else:
                rows.append(i)
                cols.append(j)
                vals.append(w)
        return cls.from_coo(n, rows, cols, vals, loops)

    @classmethod
    def from_matrix(cls, w: np.ndarray) -> "WeightedGraph":
        """Undirected graph from a symmetric matrix; the diagonal is ignored."""
        ii, jj = np.nonzero(np.triu(w, 1))
        return cls.from_coo(w.shape[0], ii, jj, w[ii, jj])

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def row_of_entries(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def strength(self) -> np.ndarray:
        """k_i = sum_j A_ij, with A_ii = 2 * loop weight."""
        return np.bincount(self.row_of_entries(), weights=self.weights, minlength=self.n) + 2.0 * self.loops

    def total_weight(self) -> float:
        """m = (sum_ij A_ij) / 2."""
        return float(self.weights.sum() / 2.0 + self.loops.sum())

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.row_of_entries(), self.indices] = self.weights
        a[np.diag_indices(self.n)] = 2.0 * self.loops
        return a

    def edge_count(self) -> int:
        return len(self.indices) // 2


@dataclass
class Partition:
    assignment: list[int]

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(list(range(n)))

    def compact(self) -> "Partition":
        """Relabel communities 0..K-1 in order of first appearance."""
        ids: dict[int, int] = {}
        return Partition([ids.setdefault(int(c), len(ids)) for c in self.assignment])

    @property
    def n_communities(self) -> int:
        return len(set(self.assignment))

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for i, c in enumerate(self.assignment):
            out.setdefault(c, []).append(i)
        return [out[c] for c in sorted(out)]


@dataclass
class CommunityState:
    """Per-community W_in (ordered-pair internal weight) and W_tot."""

    membership: list[int]
    w_in: dict[int, float] = field(default_factory=dict)
    w_tot: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_partition(cls, g: WeightedGraph, p: Partition) -> "CommunityState":
        k = g.strength()
        st = cls(list(p.assignment))
        for i, c in enumerate(p.assignment):
            st.w_tot[c] = st.w_tot.get(c, 0.0) + k[i]
            st.w_in[c] = st.w_in.get(c, 0.0) + 2.0 * g.loops[i]
            nb, w = g.neighbors(i)
            for j, x in zip(nb, w):
                if p.assignment[j] == c:
                    st.w_in[c] += x
        return st

    def k_in(self, g: WeightedGraph, node: int, target: int) -> float:
        nb, w = g.neighbors(node)
        return float(sum(x for j, x in zip(nb, w) if j != node and self.membership[j] == target))

    def detach(self, g: WeightedGraph, node: int, new_id: int) -> None:
        """Move ``node`` out of its community into the empty community ``new_id``."""
        k = float(g.strength()[node])
        c = self.membership[node]
        kin = self.k_in(g, node, c)
        self.w_tot[c] -= k
        self.w_in[c] -= 2.0 * kin + 2.0 * g.loops[node]
        self.membership[node] = new_id
        self.w_tot[new_id] = k
        self.w_in[new_id] = 2.0 * g.loops[node]


def build_st_graph(sg: SpatialGraph, tg: TemporalGraph) -> WeightedGraph:
    """Hadamard product of the 0/1 spatial matrix and the co-occurrence weights.

    Zero-weight products are dropped, so temporally disjoint stays are not linked.
    """
    w = np.where(sg.matrix(), tg.weight, 0.0)
    return WeightedGraph.from_matrix(w)


def modularity(g: WeightedGraph, p: Partition | Sequence[int]) -> float:
    a = np.asarray(p.assignment if isinstance(p, Partition) else p)
    _, a = np.unique(a, return_inverse=True)
    k = g.strength()
    m2 = k.sum()
    if m2 <= 0:
        return 0.0
    rows = g.row_of_entries()
    same = a[rows] == a[g.indices]
    n_c = int(a.max()) + 1 if len(a) else 0
    inside = np.bincount(a[rows][same], weights=g.weights[same], minlength=n_c) + 2.0 * np.bincount(
        a, weights=g.loops, minlength=n_c
    )
    tot = np.bincount(a, weights=k, minlength=n_c)
    return float(np.sum(inside / m2 - (tot / m2) ** 2))


def modularity_gain(g: WeightedGraph, state: CommunityState, node: int, target: int) -> float:
    """Gain of inserting an isolated ``node`` into ``target``.

    Equals Q(node in target) - Q(node alone) = k_in / m - W_tot * k_i / (2 m^2).
    """
    k = g.strength()
    m2 = float(k.sum())
    if m2 <= 0:
        return 0.0
    ki = float(k[node])
    kin = state.k_in(g, node, target)
    w_in = state.w_in.get(target, 0.0)
    w_tot = state.w_tot.get(target, 0.0)
    loop = 2.0 * g.loops[node]
    after = (w_in + 2.0 * kin + loop) / m2 - ((w_tot + ki) / m2) ** 2
    before = w_in / m2 - (w_tot / m2) ** 2 + loop / m2 - (ki / m2) ** 2
    return after - before


def aggregate(g: WeightedGraph, p: Partition | Sequence[int]) -> WeightedGraph:
    """Collapse communities (ids 0..K-1) into super-nodes.

    Internal weight (edges plus member self-loops) becomes the super-node's
    self-loop; weights between communities are summed.
    """
    a = np.asarray(p.assignment if isinstance(p, Partition) else p, dtype=np.int64)
    n_c = int(a.max()) + 1 if len(a) else 0
    rows = g.row_of_entries()
    ci, cj = a[rows], a[g.indices]
    same = ci == cj
    loops = np.bincount(a, weights=g.loops, minlength=n_c) + 0.5 * np.bincount(
        ci[same], weights=g.weights[same], minlength=n_c
    )
    ext = ~same
    key = ci[ext] * n_c + cj[ext]
    uniq, inv = np.unique(key, return_inverse=True)
    w = np.bincount(inv, weights=g.weights[ext], minlength=len(uniq))
    ur, uc = np.divmod(uniq, max(n_c, 1))
    indptr = np.searchsorted(ur, np.arange(n_c + 1)).astype(np.int64)
    return WeightedGraph(indptr, uc.astype(np.int64), w, loops)


@njit(cache=True)
def _local_moves(indptr, indices, weights, k, m, tolerance, comm, tot, links, seen, cand, log):
    """One pass of phase 1 over nodes in ascending order.

    ``comm``/``tot`` are updated in place; accepted moves are written to
    ``log`` as (node, from, to, scaled gain).  Returns the number of moves.
    """
    n = len(k)
    m2 = 2.0 * m
    moves = 0
    for i in range(n):
        ci = comm[i]
        ki = k[i]
        cnt = 0
        for p in range(indptr[i], indptr[i + 1]):
            c = comm[indices[p]]
            if not seen[c]:
                seen[c] = True
                links[c] = 0.0
                cand[cnt] = c
                cnt += 1
            links[c] += weights[p]
        tot[ci] -= ki
        # m * dQ of inserting the detached node: k_in - W_tot * k_i / 2m
        own = (links[ci] if seen[ci] else 0.0) - tot[ci] * ki / m2
        best_c = ci
        best = own
        for q in range(cnt):
            c = cand[q]
            gain = links[c] - tot[c] * ki / m2
            if gain > best or (gain == best and c < best_c):
                best_c = c
                best = gain
        if best_c != ci and (best - own) / m <= tolerance:
            best_c = ci
        tot[best_c] += ki
        if best_c != ci:
            comm[i] = best_c
            log[moves, 0] = i
            log[moves, 1] = ci
            log[moves, 2] = best_c
            log[moves, 3] = best - own
            moves += 1
        for q in range(cnt):
            seen[cand[q]] = False
    return moves


def _move_nodes(g: WeightedGraph, tolerance: float, debug: bool) -> tuple[np.ndarray, bool]:
    """Phase 1: repeat passes until a full pass moves nothing."""
    n = g.n
    k = g.strength()
    m = float(k.sum() / 2.0)
    comm = np.arange(n, dtype=np.int64)
    tot = k.copy()
    links = np.zeros(n)
    seen = np.zeros(n, dtype=np.bool_)
    cand = np.zeros(n, dtype=np.int64)
    log = np.zeros((n, 4))
    moved_any = False
    q_track = modularity(g, comm) if debug else 0.0
    while True:
        before = comm.copy() if debug else None
        moves = _local_moves(g.indptr, g.indices, g.weights, k, m, tolerance, comm, tot, links, seen, cand, log)
        if debug:
            q_track = _replay(g, before, log[:moves], m, q_track)
        if moves == 0:
            break
        moved_any = True
    return comm, moved_any


def _replay(g: WeightedGraph, comm: np.ndarray, log: np.ndarray, m: float, q: float) -> float:
    """Re-apply logged moves, checking incremental Q against a full recomputation."""
    for node, _, to, gain in log:
        comm[int(node)] = int(to)
        q += gain / m
        full = modularity(g, comm)
        if abs(full - q) > 1e-9:
            raise InvariantError(f"incremental modularity {q!r} != recomputed {full!r}")
    return q


@dataclass
class LouvainResult:
    partition: Partition
    modularity: float
    levels: int
    history: list[float]


def louvain(g: WeightedGraph, tolerance: float = TOLERANCE, debug: bool = False) -> LouvainResult:
    """Deterministic Fast Unfolding; returns the partition of the original nodes."""
    if g.total_weight() <= 0:
        return LouvainResult(Partition.singletons(g.n), 0.0, 0, [0.0])
    assignment = np.arange(g.n)
    current = g
    q = modularity(g, assignment)
    history = [q]
    levels = 0
    while True:
        comm, moved = _move_nodes(current, tolerance, debug)
        if not moved:
            break
        part = Partition(comm.tolist()).compact()
        new_q = modularity(current, part)
        if new_q - q <= tolerance:
            break
        assignment = np.asarray(part.assignment)[assignment]
        current = aggregate(current, part)
        levels += 1
        if debug:
            q_agg = modularity(current, np.arange(current.n))
            if abs(q_agg - new_q) > 1e-9:
                raise InvariantError(f"aggregation changed modularity: {new_q!r} -> {q_agg!r}")
        q = new_q
        history.append(q)
    final = Partition(assignment.tolist()).compact()
    return LouvainResult(final, modularity(g, final), levels, history)


@dataclass(frozen=True)
class ActivityLocation:
    id: int
    uid: str
    stay_ids: tuple[int, ...]
    cells: tuple[tuple[int, int], ...]
    centroid: tuple[float, float]
    total_duration_slots: int


def to_activity_locations(
    p: Partition, stays: Sequence[Stay], config: GridConfig = GridConfig()
) -> list[ActivityLocation]:
    """One location per community, ordered by descending total duration.

    Node i of the partition is ``stays[i]``.
    """
    if len(p.assignment) != len(stays):
        raise ValueError("partition does not cover the stays")
    groups: dict[int, list[Stay]] = {}
    for s, c in zip(stays, p.assignment):
        groups.setdefault(c, []).append(s)
    rows = []
    for members in groups.values():
        xs, ys = config.cell_center([s.grid.r for s in members], [s.grid.c for s in members])
        rows.append(
            (
                -sum(s.duration_slots for s in members),
                min(s.id for s in members),
                members,
                (float(np.mean(xs)), float(np.mean(ys))),
            )
        )
    rows.sort(key=lambda r: (r[0], r[1]))
    uid = stays[0].uid if stays else ""
    return [
        ActivityLocation(
            id=k,
            uid=uid,
            stay_ids=tuple(s.id for s in members),
            cells=tuple(sorted({(s.grid.r, s.grid.c) for s in members})),
            centroid=centroid,
            total_duration_slots=-neg,
        )
        for k, (neg, _, members, centroid) in enumerate(rows)
    ]
