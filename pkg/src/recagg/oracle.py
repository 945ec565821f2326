"""Slow, obviously-correct reference implementations used to cross-check the engine.

The ``*_horn`` functions apply the Horn-clause definitions of the aggregates
literally: they build every permutation prefix of the input set as a list and
iterate the rules to a fixpoint.  This is factorial in the set size, so inputs
are capped at :data:`MAX_HORN_SIZE` elements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_model import DatalogError, arith, compare

MAX_HORN_SIZE = 7


class SizeLimit(DatalogError):
    pass


class NonStochasticRow(DatalogError):
    pass


class EmptyCluster(DatalogError):
    pass


class OracleInconsistency(DatalogError):
    pass


def _check_size(s) -> list:
    items = sorted(set(s), key=lambda v: (type(v).__name__, v))
    if len(items) > MAX_HORN_SIZE:
        raise SizeLimit(f"Horn oracle limited to {MAX_HORN_SIZE} elements, got {len(items)}")
    return items


def new(x, lst: tuple) -> bool:
    """``new(X, [])``  and  ``new(X, [Y|L]) :- X <> Y, new(X, L)``."""
    if not lst:
        return True
    head, rest = lst[0], lst[1:]
    return x != head and new(x, rest)


def ccp_horn(s) -> set[tuple[int, tuple]]:
    """Continuous count: every ``(C, L)`` derivable from

    ``ccp(C, [X]) :- p(X), C = 1.`` and
    ``ccp(C1, [X|L]) :- p(X), ccp(C, L), C1 = C + 1, new(X, L).``
    """
    items = _check_size(s)
    facts = {(1, (x,)) for x in items}
    frontier = set(facts)
    while frontier:
        derived = set()
        for c, lst in frontier:
            for x in items:
                if new(x, lst):
                    fact = (c + 1, (x,) + lst)
                    if fact not in facts:
                        derived.add(fact)
        facts |= derived
        frontier = derived
    return facts


def final_count_horn(s) -> int:
    """``final_count(C) :- ccp(C, _), C1 = C + 1, not ccp(C1, _).``"""
    counts = {c for c, _ in ccp_horn(s)}
    finals = [c for c in counts if c + 1 not in counts]
    if not finals:
        raise OracleInconsistency("empty set has no final count")
    if len(finals) != 1:
        raise OracleInconsistency(f"several final counts: {finals}")
    return finals[0]


def csc_facts(s) -> set[tuple]:
    """Continuous sum and count ``(S, C, L)``:

    ``csc(S, C, [X]) :- p(X), S = X, C = 1.``
    ``csc(S1, C1, [X|L]) :- p(X), csc(S, C, L), S1 = S + X, C1 = C + 1, new(X, L).``
    """
    items = _check_size(s)
    facts = {(x, 1, (x,)) for x in items}
    frontier = set(facts)
    while frontier:
        derived = set()
        for total, c, lst in frontier:
            for x in items:
                if new(x, lst):
                    fact = (arith("+", total, x), c + 1, (x,) + lst)
                    if fact not in facts:
                        derived.add(fact)
        facts |= derived
        frontier = derived
    return facts


def _finals_at_count(facts, value_index: int, final_count: int) -> list:
    return [f[value_index] for f in facts if f[1] == final_count]


def _unique(values, what: str):
    distinct = set(values)
    if len(distinct) == 1:
        return distinct.pop()
    first = min(distinct)
    if all(math.isclose(v, first, rel_tol=1e-12, abs_tol=0.0) for v in distinct):
        return first
    raise OracleInconsistency(f"permutations disagree on {what}: {sorted(distinct)}")


def csc_horn(s):
    """``final_sum(S) :- csc(S, C, _), final_count(C).``

    Every permutation must reach the same sum; float inputs are allowed to
    differ in the last bits between permutations.
    """
    return _unique(_finals_at_count(csc_facts(s), 0, final_count_horn(s)), "sum")


def avg_horn(s):
    """``final_avg(Avg) :- csc(S, C, _), Avg = S / C, final_count(C).``"""
    c = final_count_horn(s)
    return _unique((arith("/", total, c) for total in _finals_at_count(csc_facts(s), 0, c)), "avg")


def _larger(x, y):
    # larger(X, Y, X) :- X > Y.   larger(X, Y, Y) :- X <= Y.
    return x if compare(">", x, y) else y


def _smaller(x, y):
    return x if compare("<", x, y) else y


def _cmp_facts(s, pick) -> set[tuple]:
    items = _check_size(s)
    facts = {(x, 1, (x,)) for x in items}
    frontier = set(facts)
    while frontier:
        derived = set()
        for m, c, lst in frontier:
            for x in items:
                if new(x, lst):
                    fact = (pick(m, x), c + 1, (x,) + lst)
                    if fact not in facts:
                        derived.add(fact)
        facts |= derived
        frontier = derived
    return facts


def cmp_horn(s):
    """``final_max(M) :- cmp(M, C, _), final_count(C).`` with ``larger``."""
    return _unique(_finals_at_count(_cmp_facts(s, _larger), 0, final_count_horn(s)), "max")


def cmin_horn(s):
    """Dual of :func:`cmp_horn` using the smaller of two values."""
    return _unique(_finals_at_count(_cmp_facts(s, _smaller), 0, final_count_horn(s)), "min")


HORN_ORACLES = {
    "count": final_count_horn,
    "sum": csc_horn,
    "avg": avg_horn,
    "min": cmin_horn,
    "max": cmp_horn,
}


# ---------------------------------------------------------------- Markov chain


def markov_reference(transition, init, steps: int | None = None, epsilon: float | None = None, history: bool = False):
    """Iterate ``v <- v @ P`` from ``init``.

    Runs ``steps`` products, or until the largest component change is at most
    ``epsilon`` (capped by ``steps`` when both are given).  With ``history``
    the list of all visited vectors is returned instead of the last one.
    """
    P = np.asarray(transition, dtype=float)
    v = np.asarray(init, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] != v.shape[0]:
        raise ValueError("transition must be square and match init")
    for i, row_sum in enumerate(P.sum(axis=1)):
        if abs(row_sum - 1.0) > 1e-12 or (P[i] < 0).any():
            raise NonStochasticRow(f"row {i} sums to {row_sum!r}")
    if steps is None and epsilon is None:
        raise ValueError("give steps, epsilon or both")
    out = [v]
    k = 0
    while steps is None or k < steps:
        nxt = v @ P
        k += 1
        out.append(nxt)
        done = epsilon is not None and np.max(np.abs(nxt - v)) <= epsilon
        v = nxt
        if done:
            break
    return out if history else v


# ---------------------------------------------------------------- Lloyd's algorithm


@dataclass
class KMeansTrace:
    centers: list[np.ndarray]
    assignments: list[np.ndarray]
    empty_clusters: bool = False


def kmeans_reference(points, init_centers, max_iters: int = 100, on_empty: str = "keep") -> KMeansTrace:
    """Textbook Lloyd iteration.

    ``centers[k]`` are the centers used for ``assignments[k]``; the last center
    set is the one computed from the last assignment.  Points go to the center
    with the smallest ``(squared distance, center index)``.  Stops once an
    assignment repeats or after ``max_iters`` assignments.  A center that
    attracts no point keeps its position (``on_empty="keep"``) or raises
    :class:`EmptyCluster` (``on_empty="raise"``).
    """
    X = np.asarray(points, dtype=float)
    C = np.asarray(init_centers, dtype=float).copy()
    if X.ndim != 2 or C.ndim != 2 or X.shape[1] != C.shape[1]:
        raise ValueError("points and centers must be 2-D with the same number of columns")
    if len(X) == 0 or len(C) == 0:
        raise ValueError("need at least one point and one center")
    trace = KMeansTrace(centers=[C.copy()], assignments=[])
    prev = None
    for _ in range(max_iters):
        assign = np.empty(len(X), dtype=int)
        for i, x in enumerate(X):
            best = None
            for k, c in enumerate(C):
                d = float(np.sum((x - c) ** 2))
                if best is None or (d, k) < best:
                    best = (d, k)
            assign[i] = best[1]
        trace.assignments.append(assign)
        newC = C.copy()
        for k in range(len(C)):
            members = X[assign == k]
            if len(members):
                newC[k] = members.mean(axis=0)
            else:
                trace.empty_clusters = True
                if on_empty == "raise":
                    raise EmptyCluster(f"center {k} has no points")
        trace.centers.append(newC)
        C = newC
        if prev is not None and np.array_equal(prev, assign):
            break
        prev = assign
    return trace


def within_cluster_ss(points, centers, assign) -> float:
    X = np.asarray(points, dtype=float)
    C = np.asarray(centers, dtype=float)
    return float(np.sum((X - C[assign]) ** 2))
