"""Per-user spatiotemporal knowledge graph of stays.

The store keeps the stays themselves as the base facts (belongsTo,
locatedIn, occursOn, coversSlot are derived from them on demand) and
records the two inferred relations: spatial relatedness, via grid-level
connected components under queen contiguity, and temporal co-occurrence,
via the cosine of 144-slot occupancy vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .ingest import SLOTS_PER_DAY, GridIndex
from .stays import Stay

BELONGS_TO = "belongsTo"
LOCATED_IN = "locatedIn"
OCCURS_ON = "occursOn"
COVERS_SLOT = "coversSlot"
SPATIALLY_RELATED = "spatiallyRelated"
COOCCURS_WITH = "cooccursWith"

QUEEN_OFFSETS = tuple((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0))


@dataclass(frozen=True)
class Triple:
    s: str
    p: str
    o: str
    weight: float | None = None

    def to_json(self) -> dict:
        d = {"s": self.s, "p": self.p, "o": self.o}
        if self.weight is not None:
            d["weight"] = self.weight
        return d


def user_id(uid: str) -> str:
    return f"user:{uid}"


def stay_id(uid: str, sid: int) -> str:
    return f"stay:{uid}:{sid}"


def grid_id(g: GridIndex) -> str:
    return f"grid:{g[0]}:{g[1]}"


def stay_days(stay: Stay) -> range:
    return range(stay.start.day, (stay.end_linear - 1) // SLOTS_PER_DAY + 1)


@dataclass
class SpatialGraph:
    """Unweighted stay graph; stays are related iff their cells share a component."""

    nodes: list[int]
    component: np.ndarray

    def matrix(self) -> np.ndarray:
        m = self.component[:, None] == self.component[None, :]
        np.fill_diagonal(m, False)
        return m

    def edges(self) -> list[tuple[int, int]]:
        ii, jj = np.nonzero(np.triu(self.matrix(), 1))
        return [(self.nodes[i], self.nodes[j]) for i, j in zip(ii, jj)]

    def has_edge(self, a: int, b: int) -> bool:
        ia, ib = self.nodes.index(a), self.nodes.index(b)
        return ia != ib and self.component[ia] == self.component[ib]


@dataclass
class TemporalGraph:
    """Co-occurrence weights on the spatial graph's edges (dense, symmetric)."""

    nodes: list[int]
    weight: np.ndarray
    mask: np.ndarray

    def edges(self) -> list[tuple[int, int, float]]:
        ii, jj = np.nonzero(np.triu(self.mask, 1))
        return [(self.nodes[i], self.nodes[j], float(self.weight[i, j])) for i, j in zip(ii, jj)]


@dataclass
class STKGStore:
    uid: str
    stays: dict[int, Stay] = field(default_factory=dict)
    spatial: SpatialGraph | None = None
    temporal: TemporalGraph | None = None

    def entities(self) -> dict[str, set[str]]:
        ent: dict[str, set[str]] = {"User": {user_id(self.uid)}, "Stay": set(), "Grid": set(), "Day": set(), "TimeSlot": set()}
        for s in self.stays.values():
            ent["Stay"].add(stay_id(self.uid, s.id))
            ent["Grid"].add(grid_id(s.grid))
            ent["Day"].update(f"day:{d}" for d in stay_days(s))
            ent["TimeSlot"].update(f"slot:{k}" for k in s.occupied_slots())
        return ent

    def base_triples(self) -> Iterator[Triple]:
        u = user_id(self.uid)
        for s in self.stays.values():
            sid = stay_id(self.uid, s.id)
            yield Triple(sid, BELONGS_TO, u)
            yield Triple(sid, LOCATED_IN, grid_id(s.grid))
            for d in stay_days(s):
                yield Triple(sid, OCCURS_ON, f"day:{d}")
            for k in s.occupied_slots():
                yield Triple(sid, COVERS_SLOT, f"slot:{k}")

    def relation_triples(self) -> Iterator[Triple]:
        if self.spatial is not None:
            for a, b in self.spatial.edges():
                yield Triple(stay_id(self.uid, a), SPATIALLY_RELATED, stay_id(self.uid, b))
        if self.temporal is not None:
            for a, b, w in self.temporal.edges():
                yield Triple(stay_id(self.uid, a), COOCCURS_WITH, stay_id(self.uid, b), w)

    def triples(self) -> Iterator[Triple]:
        """All facts; symmetric relations are listed once with s < o by stay id."""
        yield from self.base_triples()
        yield from self.relation_triples()

    def stay_list(self) -> list[Stay]:
        return [self.stays[k] for k in sorted(self.stays)]


def build_stkg(stays: Sequence[Stay], uid: str | None = None) -> STKGStore:
    if uid is None:
        if not stays:
            raise ValueError("uid is required for an empty stay list")
        uid = stays[0].uid
    store = STKGStore(uid)
    for s in stays:
        if s.uid != uid:
            raise ValueError(f"stay {s.id} belongs to {s.uid}, not {uid}")
        store.stays[s.id] = s
    return store


def queen_neighbors(g: GridIndex | tuple[int, int]) -> set[GridIndex]:
    r, c = g
    return {GridIndex(r + a, c + b) for a, b in QUEEN_OFFSETS}


def grid_components(cells: Iterable[tuple[int, int]]) -> dict[tuple[int, int], int]:
    """Connected components of distinct cells under queen contiguity.

    Component ids follow the sorted order of each component's smallest cell.
    """
    cells = sorted(set(map(tuple, cells)))
    parent = {g: g for g in cells}

    def find(g):
        while parent[g] != g:
            parent[g] = parent[parent[g]]
            g = parent[g]
        return g

    for g in cells:
        for nb in queen_neighbors(g):
            if nb in parent:
                ra, rb = find(g), find(nb)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots: dict[tuple[int, int], int] = {}
    out = {}
    for g in cells:
        out[g] = roots.setdefault(find(g), len(roots))
    return out


def infer_spatial_relations(store: STKGStore) -> SpatialGraph:
    stays = store.stay_list()
    comp = grid_components(s.grid for s in stays)
    sg = SpatialGraph(
        nodes=[s.id for s in stays],
        component=np.asarray([comp[tuple(s.grid)] for s in stays], dtype=np.int64),
    )
    store.spatial = sg
    return sg


def cosine_cooccurrence(a, b) -> float:
    """Cosine of two binary 144-slot vectors (ints as bitmasks, or bool arrays)."""
    if isinstance(a, (int, np.integer)) and isinstance(b, (int, np.integer)):
        na, nb, inter = int(a).bit_count(), int(b).bit_count(), (int(a) & int(b)).bit_count()
    else:
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        na, nb, inter = int(a.sum()), int(b.sum()), int((a & b).sum())
    if na == 0 or nb == 0:
        return 0.0
    return inter / math.sqrt(na * nb)


def cosine_matrix(occ: np.ndarray) -> np.ndarray:
    """Pairwise cosine of boolean occupancy rows, same arithmetic as cosine_cooccurrence."""
    f = occ.astype(np.float64)
    inter = f @ f.T
    n = occ.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        cs = inter / np.sqrt(np.outer(n, n))
    return np.nan_to_num(cs, nan=0.0)


def infer_temporal_relations(store: STKGStore, sg: SpatialGraph, occ: np.ndarray | None = None) -> TemporalGraph:
    """Cosine co-occurrence on every spatially related pair.

    ``occ`` may supply the (n, 144) occupancy matrix in ``sg.nodes`` order.
    """
    if occ is None:
        occ = np.zeros((len(sg.nodes), SLOTS_PER_DAY), dtype=bool)
        for i, sid in enumerate(sg.nodes):
            o = store.stays[sid].occupancy
            occ[i] = [(o >> k) & 1 for k in range(SLOTS_PER_DAY)]
    mask = sg.matrix()
    w = np.where(mask, cosine_matrix(occ), 0.0)
    tg = TemporalGraph(nodes=list(sg.nodes), weight=w, mask=mask)
    store.temporal = tg
    return tg


def write_triples(fh, stores: Iterable[STKGStore]) -> int:
    n = 0
    for store in stores:
        for t in store.triples():
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")
            n += 1
    return n
