"""Finite multigraphs used as diagram skeletons.

A diagram is an isomorphism class of a finite multigraph (self-loops and
parallel edges allowed), possibly with distinguishable marked vertices of
unrestricted valence; unmarked vertices must have degree >= 3 (a self-loop
contributes 2).  Disconnected graphs are included.  The automorphism order
counts symmetries acting on half-edges, so that Wick-pairing counts divided
by |Aut| reproduce the standard Gaussian-moment prefactors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

__all__ = [
    "Diagram",
    "DiagramLimitError",
    "enumerate_diagrams",
    "automorphism_order",
    "pairings",
]

ENUMERATION_CEILING = 4


class DiagramLimitError(ValueError):
    """Requested loop order above the configured enumeration ceiling."""


@dataclass(frozen=True)
class Diagram:
    """An isomorphism-class representative.

    marks[v] is None for an ordinary vertex or a small integer id for a
    marked one; mark ids are ordered (mark 0 and mark 1 are distinguishable).
    Edges are unordered vertex pairs (u <= w); u == w is a self-loop.
    """

    num_vertices: int
    marks: tuple
    edges: tuple

    def __post_init__(self):
        norm = tuple(sorted(tuple(sorted(e)) for e in self.edges))
        object.__setattr__(self, "edges", norm)
        if len(self.marks) != self.num_vertices:
            raise ValueError("marks must list one entry per vertex")

    @cached_property
    def degrees(self):
        deg = [0] * self.num_vertices
        for u, w in self.edges:
            deg[u] += 1
            deg[w] += 1
        return tuple(deg)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def euler_characteristic(self):
        return self.num_vertices - len(self.edges)

    @property
    def loop_order(self):
        return -self.euler_characteristic

    @cached_property
    def canonical_key(self):
        """Total-order key on isomorphism classes (minimized relabeling)."""
        best = None
        for perm in _allowed_permutations(self):
            enc = _encode(self, perm)
            if best is None or enc < best:
                best = enc
        return best

    @cached_property
    def automorphism_order(self):
        return automorphism_order(self)

    def is_valid(self):
        return all(
            self.marks[v] is not None or self.degrees[v] >= 3
            for v in range(self.num_vertices)
        )

    def dump(self):
        ids = ",".join(str(m) for m in self.marks if m is not None)
        es = ",".join(f"({u},{w})" for u, w in self.edges)
        return (
            f"V={self.num_vertices} marks={ids} edges={es} "
            f"chi={self.euler_characteristic} aut={self.automorphism_order}"
        )


def _allowed_permutations(diagram):
    """Vertex permutations fixing each marked vertex (marks are ordered)."""
    unmarked = [v for v in range(diagram.num_vertices) if diagram.marks[v] is None]
    for p in itertools.permutations(unmarked):
        perm = list(range(diagram.num_vertices))
        for a, b in zip(unmarked, p):
            perm[a] = b
        yield perm


def _encode(diagram, perm):
    edges = tuple(sorted(tuple(sorted((perm[u], perm[w]))) for u, w in diagram.edges))
    marks = tuple(
        -1 if diagram.marks[v] is None else diagram.marks[v] for v in _inverse(perm)
    )
    return (diagram.num_vertices, marks, edges)


def _inverse(perm):
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return inv


def automorphism_order(diagram):
    """Order of the half-edge symmetry group.

    Vertex permutations preserving marks and the edge multiset, times the
    edge-local factor: m! per parallel-edge family of multiplicity m and an
    extra 2 per self-loop.
    """
    base_enc = _encode(diagram, list(range(diagram.num_vertices)))
    nperm = sum(1 for perm in _allowed_permutations(diagram) if _encode(diagram, perm) == base_enc)
    local = 1
    mult = {}
    for e in diagram.edges:
        mult[e] = mult.get(e, 0) + 1
    for (u, w), m in mult.items():
        local *= math.factorial(m)
        if u == w:
            local *= 2**m
    return nperm * local


def pairings(n):
    """All perfect matchings of {1..n}; empty for odd n.

    Each matching is a tuple of sorted pairs sorted by first element; there
    are n!/(2^k k!) of them for n = 2k.
    """
    if n % 2 == 1:
        return []
    items = list(range(1, n + 1))

    def rec(rest):
        if not rest:
            yield ()
            return
        a = rest[0]
        for i in range(1, len(rest)):
            b = rest[i]
            tail = rest[1:i] + rest[i + 1 :]
            for m in rec(tail):
                yield ((a, b),) + m

    return [m for m in rec(items)]


def _degree_partitions(total, parts, min_part):
    """Non-increasing sequences of ``parts`` integers >= min_part summing to total."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    hi = total - min_part * (parts - 1)
    for first in range(min(hi, total), min_part - 1, -1):
        for rest in _degree_partitions(total - first, parts - 1, min_part):
            if not rest or first >= rest[0]:
                yield (first,) + rest


def _realizations(deg):
    """All edge multisets realizing a degree sequence, each exactly once.

    Edges are produced in non-decreasing lexicographic order: the first
    endpoint is always the smallest vertex with stubs left, and consecutive
    edges at that vertex have non-decreasing partners.
    """
    n = len(deg)

    def rec(remaining, min_partner, acc):
        u = next((v for v in range(n) if remaining[v] > 0), None)
        if u is None:
            yield tuple(acc)
            return
        lo = min_partner if acc and acc[-1][0] == u else u
        for w in range(lo, n):
            if w == u:
                if remaining[u] < 2:
                    continue
            elif remaining[w] < 1:
                continue
            remaining[u] -= 1
            remaining[w] -= 1
            acc.append((u, w))
            yield from rec(remaining, w, acc)
            acc.pop()
            remaining[u] += 1
            remaining[w] += 1

    yield from rec(list(deg), 0, [])


def enumerate_diagrams(max_minus_chi, marked_vertices=0):
    """One representative per isomorphism class with -chi <= max_minus_chi.

    Unmarked vertices have degree >= 3; the ``marked_vertices`` marked ones
    (ids 0, 1) have arbitrary degree and are listed first.  The vertex-free
    empty graph is never produced; with marks, the bare marked vertices are.
    """
    if max_minus_chi < 0:
        raise ValueError("max_minus_chi must be >= 0")
    if max_minus_chi > ENUMERATION_CEILING:
        raise DiagramLimitError(
            f"-chi = {max_minus_chi} above the enumeration ceiling {ENUMERATION_CEILING}"
        )
    if marked_vertices not in (0, 1, 2):
        raise ValueError("marked_vertices must be 0, 1 or 2")

    m = marked_vertices
    seen = {}
    for v_unmarked in range(0, 2 * (max_minus_chi + m) + 1):
        nv = m + v_unmarked
        if nv == 0:
            continue
        for ne in range(0, max_minus_chi + nv + 1):
            if 2 * ne < 3 * v_unmarked:
                continue
            stubs = 2 * ne
            for marked_deg in itertools.product(range(stubs + 1), repeat=m):
                rest = stubs - sum(marked_deg)
                if rest < 3 * v_unmarked:
                    continue
                for part in _degree_partitions(rest, v_unmarked, 3):
                    deg = tuple(marked_deg) + part
                    for edges in _realizations(deg):
                        diag = Diagram(
                            nv,
                            tuple(range(m)) + (None,) * v_unmarked,
                            edges,
                        )
                        key = diag.canonical_key
                        if key not in seen:
                            seen[key] = diag
    return [seen[k] for k in sorted(seen)]
