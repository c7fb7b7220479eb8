import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_stay
from stkg_activity.ingest import GridIndex
from stkg_activity.stkg import (
    BELONGS_TO,
    COOCCURS_WITH,
    COVERS_SLOT,
    LOCATED_IN,
    OCCURS_ON,
    SPATIALLY_RELATED,
    build_stkg,
    cosine_cooccurrence,
    infer_spatial_relations,
    infer_temporal_relations,
    queen_neighbors,
    write_triples,
)


def predicates(store):
    out = {}
    for t in store.triples():
        out[t.p] = out.get(t.p, 0) + 1
    return out


def test_single_stay_triples():
    store = build_stkg([make_stay(0, 10, 10, 50, 53)])
    assert predicates(store) == {BELONGS_TO: 1, LOCATED_IN: 1, OCCURS_ON: 1, COVERS_SLOT: 3}
    triples = list(store.triples())
    assert triples[1].o == "grid:10:10"
    assert {t.o for t in triples if t.p == COVERS_SLOT} == {"slot:50", "slot:51", "slot:52"}


def test_empty_store():
    store = build_stkg([], uid="u")
    assert list(store.triples()) == []
    ent = store.entities()
    assert ent["User"] == {"user:u"}
    assert all(not v for k, v in ent.items() if k != "User")


def test_two_stays_two_locations():
    store = build_stkg([make_stay(0, 1, 1, 0, 5), make_stay(1, 2, 2, 5, 9)])
    assert predicates(store)[LOCATED_IN] == 2


def test_mixed_uids_rejected():
    with pytest.raises(ValueError):
        build_stkg([make_stay(0, 1, 1, 0, 5, uid="a"), make_stay(1, 1, 1, 5, 9, uid="b")])


def test_queen_examples():
    assert queen_neighbors((5, 5)) == {(4, 4), (4, 5), (4, 6), (5, 4), (5, 6), (6, 4), (6, 5), (6, 6)}
    assert (-1, -1) in queen_neighbors((0, 0))


@given(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6))
def test_queen_properties(r, c):
    nb = queen_neighbors((r, c))
    assert len(nb) == 8 and (r, c) not in nb
    assert all(GridIndex(r, c) in queen_neighbors(g) for g in nb)


def spatial(cells):
    store = build_stkg([make_stay(i, r, c, 10 * i, 10 * i + 5) for i, (r, c) in enumerate(cells)])
    return store, infer_spatial_relations(store)


def test_spatial_examples():
    assert spatial([(3, 3), (3, 3)])[1].has_edge(0, 1)
    assert spatial([(0, 0), (1, 1)])[1].has_edge(0, 1)
    sg = spatial([(0, 0), (0, 2)])[1]
    assert not sg.has_edge(0, 1)
    sg = spatial([(0, 0), (0, 2), (0, 1)])[1]
    assert sg.edges() == [(0, 1), (0, 2), (1, 2)]


def closure_oracle(cells):
    """Stay-level transitive closure of same-or-queen-adjacent cells."""
    n = len(cells)
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j and max(abs(cells[i][0] - cells[j][0]), abs(cells[i][1] - cells[j][1])) <= 1:
                adj[i, j] = True
    reach = adj | np.eye(n, dtype=bool)
    for k in range(n):
        reach |= reach[:, [k]] & reach[[k], :]
    np.fill_diagonal(reach, False)
    return reach


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=14))
def test_spatial_closure(cells):
    _, sg = spatial(cells)
    assert (sg.matrix() == closure_oracle(cells)).all()


def bits(slots):
    return sum(1 << k for k in slots)


def test_cosine_examples():
    a = bits(range(10, 20))
    assert cosine_cooccurrence(a, a) == 1.0
    assert cosine_cooccurrence(bits([1, 2]), bits([5, 6])) == 0.0
    # 9:20-9:50 shared; A runs 9:00-9:50, B 9:20-9:50
    A, B = bits(range(54, 60)), bits(range(56, 60))
    va = np.array([(A >> k) & 1 for k in range(144)])
    vb = np.array([(B >> k) & 1 for k in range(144)])
    expected = float(va @ vb) / math.sqrt(float(va @ va) * float(vb @ vb))
    assert cosine_cooccurrence(A, B) == pytest.approx(expected, abs=1e-12)
    assert cosine_cooccurrence(A, B) == pytest.approx(0.816497, abs=1e-6)
    assert cosine_cooccurrence(va.astype(bool), vb.astype(bool)) == cosine_cooccurrence(A, B)


slot_sets = st.sets(st.integers(0, 143), min_size=1, max_size=144)


@given(slot_sets)
def test_cosine_self(a):
    assert cosine_cooccurrence(bits(a), bits(a)) == pytest.approx(1.0)


@given(slot_sets, slot_sets, st.integers(0, 143))
def test_cosine_monotone_in_overlap(a, b, k):
    # move one element of b onto a slot shared with a; sizes stay fixed
    a, b = set(a), set(b)
    shared_gain = [x for x in a if x not in b]
    lose = [x for x in b if x not in a]
    if not shared_gain or not lose:
        return
    b2 = (b - {lose[k % len(lose)]}) | {shared_gain[k % len(shared_gain)]}
    assert cosine_cooccurrence(bits(a), bits(b2)) >= cosine_cooccurrence(bits(a), bits(b))


def temporal(stays):
    store = build_stkg(stays)
    sg = infer_spatial_relations(store)
    return store, sg, infer_temporal_relations(store, sg)


def test_temporal_examples():
    _, _, tg = temporal([make_stay(0, 0, 0, 50, 60), make_stay(1, 0, 1, 144 + 50, 144 + 60)])
    assert tg.weight[0, 1] == pytest.approx(1.0)
    _, _, tg = temporal([make_stay(0, 0, 0, 50, 60), make_stay(1, 0, 1, 60, 70)])
    assert tg.weight[0, 1] == 0.0 and tg.mask[0, 1]
    _, _, tg = temporal([make_stay(0, 0, 0, 50, 60), make_stay(1, 9, 9, 144 + 50, 144 + 60)])
    assert not tg.mask[0, 1] and tg.edges() == []


@st.composite
def stay_lists(draw):
    n = draw(st.integers(1, 10))
    out, t = [], 0
    for i in range(n):
        t += draw(st.integers(0, 100))
        d = draw(st.integers(2, 200))
        r, c = draw(st.tuples(st.integers(0, 3), st.integers(0, 3)))
        out.append(make_stay(i, r, c, t, t + d))
        t += d
    return out


@given(stay_lists())
def test_graph_invariants(stays):
    store, sg, tg = temporal(stays)
    assert ((tg.weight >= 0) & (tg.weight <= 1 + 1e-12)).all()
    assert (tg.weight == tg.weight.T).all()
    assert not (tg.weight[~sg.matrix()] != 0).any()
    triples = list(store.triples())
    for s in stays:
        sid = f"stay:u:{s.id}"
        assert sum(t.s == sid and t.p == LOCATED_IN for t in triples) == 1
        assert sum(t.s == sid and t.p == BELONGS_TO for t in triples) == 1
    spatial_pairs = {(t.s, t.o) for t in triples if t.p == SPATIALLY_RELATED}
    assert all(s != o for s, o in spatial_pairs)
    assert len(spatial_pairs) == len({frozenset(p) for p in spatial_pairs})
    for t in triples:
        if t.p == COOCCURS_WITH:
            assert (t.s, t.o) in spatial_pairs and t.weight is not None


def test_write_triples_jsonl():
    store, _, _ = temporal([make_stay(0, 0, 0, 50, 60), make_stay(1, 0, 1, 55, 65)])
    buf = io.StringIO()
    n = write_triples(buf, [store])
    lines = buf.getvalue().splitlines()
    assert n == len(lines)
    rows = [json.loads(x) for x in lines]
    assert {"s", "p", "o"} <= set(rows[0])
    co = [r for r in rows if r["p"] == COOCCURS_WITH]
    assert len(co) == 1 and co[0]["weight"] == pytest.approx(5 / 10)
