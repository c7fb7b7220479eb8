"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def dense_adjacency(n, edges):
    """Symmetric A with A_ii = 2 * loop weight, from (i, j, w) triples."""
    a = np.zeros((n, n))
    for i, j, w in edges:
        if i == j:
            a[i, i] += 2 * w
        else:
            a[i, j] += w
            a[j, i] += w
    return a


def modularity_oracle(a, assignment, exact=False):
    """Q = 1/2m * sum over ordered pairs (A_ij - k_i k_j / 2m) [c_i == c_j].

    With ``exact`` the sum is taken in rational arithmetic.
    """
    a = np.asarray(a, dtype=float)
    if exact:
        a = np.vectorize(Fraction, otypes=[object])(a)
    k = a.sum(axis=1)
    m2 = k.sum()
    if m2 == 0:
        return 0.0
    q = Fraction(0) if exact else 0.0
    n = len(a)
    for i in range(n):
        for j in range(n):
            if assignment[i] == assignment[j]:
                q += a[i, j] - k[i] * k[j] / m2
    return q / m2


def set_partitions(n):
    """All partitions of range(n) as restricted growth strings."""
    if n == 0:
        yield []
        return

    def rec(prefix, top):
        if len(prefix) == n:
            yield list(prefix)
            return
        for c in range(top + 2):
            prefix.append(c)
            yield from rec(prefix, max(top, c))
            prefix.pop()

    yield from rec([0], 0)


def best_modularity(a):
    """Optimum Q over all partitions, via per-community sums."""
    a = np.asarray(a, dtype=float)
    k = a.sum(axis=1)
    m2 = k.sum()
    if m2 == 0:
        return 0.0
    best = -math.inf
    for p in set_partitions(len(a)):
        p = np.asarray(p)
        onehot = np.eye(p.max() + 1)[p]
        inside = np.einsum("ic,ij,jc->c", onehot, a, onehot)
        tot = onehot.T @ k
        best = max(best, float(np.sum(inside / m2 - (tot / m2) ** 2)))
    return best


def random_connected_edges(rng, n, p_extra=0.3):
    """Random spanning tree plus extra edges, unit weights."""
    edges = set()
    for i in range(1, n):
        j = int(rng.integers(i))
        edges.add((j, i))
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < p_extra:
            edges.add((i, j))
    return sorted(edges)


def epsilon_components(x, y, eps):
    """Connected components of the eps-graph, O(n^2) union-find.

    Points are linked when dx^2 + dy^2 <= eps^2.
    """
    n = len(x)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx * dx + dy * dy <= eps * eps:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    return [find(i) for i in range(n)]


def same_partition(a, b):
    """Whether two labelings induce the same partition."""
    if len(a) != len(b):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def smoothing_oracle(t, x, y, slot_seconds=600):
    """Per-slot {record index: seconds} for one user's time-sorted records.

    Record i covers [t_i, t_{i+1}); the last record covers to its slot end.
    """
    out = {}
    n = len(t)
    for i in range(n):
        start = t[i]
        end = t[i + 1] if i + 1 < n else (t[i] // slot_seconds + 1) * slot_seconds
        s = start
        while s < end:
            k = s // slot_seconds
            e = min(end, (k + 1) * slot_seconds)
            out.setdefault(k, {})
            out[k][i] = out[k].get(i, 0) + (e - s)
            s = e
    return out


def louvain_oracle(a, tolerance=1e-10):
    """Plain Fast Unfolding on a dense matrix, recomputing Q exactly for every candidate move.

    Nodes are visited in ascending order; a node moves to the neighbouring
    community with the largest gain if it exceeds ``tolerance`` (ties: smaller
    community id).  Returns the partition of the original nodes.
    """
    a = np.asarray(a, dtype=float)
    n0 = len(a)
    labels = list(range(n0))
    cur = a
    q = modularity_oracle(cur, list(range(len(cur))), exact=True)
    while True:
        n = len(cur)
        comm = list(range(n))
        moved_any = False
        while True:
            moved = False
            for i in range(n):
                base = modularity_oracle(cur, comm, exact=True)
                best, best_c = tolerance, None
                for c in sorted({comm[j] for j in range(n) if j != i and cur[i, j] > 0} - {comm[i]}):
                    trial = list(comm)
                    trial[i] = c
                    gain = modularity_oracle(cur, trial, exact=True) - base
                    if gain > best:
                        best, best_c = gain, c
                if best_c is not None:
                    comm[i] = best_c
                    moved = moved_any = True
            if not moved:
                break
        ids = {}
        comm = [ids.setdefault(c, len(ids)) for c in comm]
        new_q = modularity_oracle(cur, comm, exact=True)
        if not moved_any or new_q - q <= tolerance:
            break
        k = len(ids)
        agg = np.zeros((k, k))
        for i in range(n):
            for j in range(n):
                agg[comm[i], comm[j]] += cur[i, j]
        labels = [comm[x] for x in labels]
        cur, q = agg, new_q
    return labels
