"""Compiled rule bodies.

A body is compiled into a chain of closures over a flat list of variable
slots.  Literal order is the written order, except that filters (comparisons,
negations, builtins) run as soon as their inputs are bound and the semi-naive
delta atom, when given, goes first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from operator import itemgetter
from typing import Callable, Iterable

from .aggregates import decd, encd
from .core_model import (
    Arith,
    Atom,
    Builtin,
    Comparison,
    Const,
    CountGuard,
    Negation,
    UnboundVariable,
    Var,
    arith,
    compare,
    term_vars,
)


class Relation:
    """Set of rows with insertion stamps and lazily built hash indexes."""

    __slots__ = ("name", "rows", "_indexes")

    def __init__(self, name: str = "", rows: Iterable[tuple] = (), stamp: int = 0):
        self.name = name
        self.rows: dict[tuple, int] = {}
        self._indexes: dict[tuple[int, ...], dict[tuple, list[tuple]]] = {}
        for r in rows:
            self.add(r, stamp)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, row: tuple) -> bool:
        return row in self.rows

    def add(self, row: tuple, stamp: int = 0) -> bool:
        if row in self.rows:
            return False
        self.rows[row] = stamp
        for positions, index in self._indexes.items():
            index.setdefault(tuple(row[i] for i in positions), []).append(row)
        return True

    def discard(self, rows: Iterable[tuple]) -> None:
        removed = False
        for r in rows:
            if self.rows.pop(r, None) is not None:
                removed = True
        if removed:
            self._indexes.clear()

    def lookup(self, positions: tuple[int, ...], key: tuple):
        if not positions:
            return self.rows
        index = self._indexes.get(positions)
        if index is None:
            index = {}
            for r in self.rows:
                index.setdefault(tuple(r[i] for i in positions), []).append(r)
            self._indexes[positions] = index
        return index.get(key, ())


EMPTY = Relation("")

# A source is the relation an atom reads plus an optional exclusive stamp bound
# ("old" facts only).
Source = tuple[Relation, "int | None"]


def _compile_term(t, slot_of: dict[str, int]) -> Callable[[list], object]:
    if isinstance(t, Const):
        v = t.value
        return lambda s: v
    if isinstance(t, Var):
        return itemgetter(slot_of[t.name])
    left = _compile_term(t.left, slot_of)
    right = _compile_term(t.right, slot_of)
    op = t.op
    return lambda s: arith(op, left(s), right(s))


def _names(t) -> set[str]:
    return {v.name for v in term_vars(t)}


@dataclass
class _Step:
    index: int
    make: Callable


@dataclass
class JoinPlan:
    """Executable body: ``run(sources, prebound, emit, stats)``."""

    slot_of: dict[str, int]
    steps: list[_Step] = field(default_factory=list)
    order: list[int] = field(default_factory=list)

    def term(self, t) -> Callable[[list], object]:
        return _compile_term(t, self.slot_of)

    def run(self, sources: dict[int, Source], prebound: dict[str, object], emit: Callable[[list], None], stats: list[int]):
        slots = [None] * len(self.slot_of)
        for name, v in prebound.items():
            slots[self.slot_of[name]] = v

        def final(s):
            stats[1] += 1
            emit(s)

        k = final
        for step in reversed(self.steps):
            k = step.make(k, sources, stats)
        k(slots)


def _ready(lit, bound: set[str]) -> bool:
    if isinstance(lit, Atom):
        return all(_names(a) <= bound for a in lit.args if isinstance(a, Arith))
    if isinstance(lit, Negation):
        return all(v.name in bound for v in lit.vars() if not v.anonymous)
    if isinstance(lit, Comparison):
        lb, rb = _names(lit.left) <= bound, _names(lit.right) <= bound
        if lb and rb:
            return True
        if lit.op == "=":
            return (isinstance(lit.left, Var) and rb) or (isinstance(lit.right, Var) and lb)
        return False
    if isinstance(lit, Builtin):
        return all(_names(t) <= bound for t in lit.inputs)
    raise TypeError(lit)


def compile_body(literals: list[tuple[int, object]], prebound: Iterable[str] = (), first: int | None = None) -> JoinPlan:
    """Compile ``literals`` (pairs of body position and literal)."""
    slot_of: dict[str, int] = {}
    for name in prebound:
        slot_of.setdefault(name, len(slot_of))
    for _, lit in literals:
        for v in lit.vars():
            slot_of.setdefault(v.name, len(slot_of))
    plan = JoinPlan(slot_of)
    bound = set(prebound)
    remaining = [(i, lit) for i, lit in literals if not isinstance(lit, CountGuard)]
    if first is not None:
        for j, (i, lit) in enumerate(remaining):
            if i == first and _ready(lit, bound):
                remaining.insert(0, remaining.pop(j))
                break
        else:
            first = None
    while remaining:
        pick = None
        if first is not None:
            pick, first = 0, None
        else:
            for j, (_, lit) in enumerate(remaining):
                if not isinstance(lit, Atom) and _ready(lit, bound):
                    pick = j
                    break
            if pick is None:
                for j, (_, lit) in enumerate(remaining):
                    if isinstance(lit, Atom) and _ready(lit, bound):
                        pick = j
                        break
        if pick is None:
            names = sorted({v.name for _, lit in remaining for v in lit.vars()} - bound)
            raise UnboundVariable(f"cannot order body literals; unbound: {', '.join(names)}")
        i, lit = remaining.pop(pick)
        plan.steps.append(_Step(i, _make_step(i, lit, bound, slot_of)))
        plan.order.append(i)
    return plan


def _make_step(i: int, lit, bound: set[str], slot_of: dict[str, int]):
    if isinstance(lit, Atom):
        return _atom_step(i, lit, bound, slot_of)
    if isinstance(lit, Negation):
        return _negation_step(i, lit, bound, slot_of)
    if isinstance(lit, Comparison):
        return _comparison_step(lit, bound, slot_of)
    return _builtin_step(lit, bound, slot_of)


def _atom_step(i: int, atom: Atom, bound: set[str], slot_of):
    key_pos: list[int] = []
    key_fns: list = []
    binds: list[tuple[int, int]] = []
    checks: list[tuple[int, int]] = []
    first_seen: dict[str, int] = {}
    for pos, a in enumerate(atom.args):
        if isinstance(a, Var) and a.name not in bound:
            if a.name in first_seen:
                checks.append((pos, first_seen[a.name]))
            else:
                first_seen[a.name] = pos
                binds.append((pos, slot_of[a.name]))
        else:
            key_pos.append(pos)
            key_fns.append(_compile_term(a, slot_of))
    bound.update(first_seen)
    key_positions = tuple(key_pos)

    def make(k, sources, stats):
        rel, limit = sources.get(i, (EMPTY, None))
        stamps = rel.rows

        def step(s):
            key = tuple(f(s) for f in key_fns)
            cands = rel.lookup(key_positions, key)
            if not cands:
                return
            stats[0] += len(cands)
            for row in cands:
                if limit is not None and stamps[row] >= limit:
                    continue
                if checks and any(row[p] != row[q] for p, q in checks):
                    continue
                for p, slot in binds:
                    s[slot] = row[p]
                k(s)

        return step

    return make


def _negation_step(i: int, neg: Negation, bound: set[str], slot_of):
    atom = neg.atom
    positions = tuple(p for p, a in enumerate(atom.args) if not (isinstance(a, Var) and a.anonymous))
    fns = [_compile_term(atom.args[p], slot_of) for p in positions]
    full = len(positions) == len(atom.args)

    def make(k, sources, stats):
        rel, _ = sources.get(i, (EMPTY, None))

        def step(s):
            key = tuple(f(s) for f in fns)
            present = key in rel.rows if full else bool(rel.lookup(positions, key))
            if not present:
                k(s)

        return step

    return make


def _comparison_step(cmp: Comparison, bound: set[str], slot_of):
    op = cmp.op
    target = None
    if op == "=":
        if isinstance(cmp.left, Var) and cmp.left.name not in bound:
            target, source = cmp.left.name, cmp.right
        elif isinstance(cmp.right, Var) and cmp.right.name not in bound:
            target, source = cmp.right.name, cmp.left
    if target is not None:
        slot = slot_of[target]
        fn = _compile_term(source, slot_of)
        bound.add(target)

        def make(k, sources, stats):
            def step(s):
                s[slot] = fn(s)
                k(s)

            return step

        return make
    left = _compile_term(cmp.left, slot_of)
    right = _compile_term(cmp.right, slot_of)

    def make(k, sources, stats):
        def step(s):
            if compare(op, left(s), right(s)):
                k(s)

        return step

    return make


def _builtin_step(b: Builtin, bound: set[str], slot_of):
    ins = [_compile_term(t, slot_of) for t in b.inputs]
    outs = []
    for t in b.outputs:
        if isinstance(t, Var) and t.name not in bound:
            outs.append(("bind", slot_of[t.name]))
            bound.add(t.name)
        else:
            outs.append(("check", _compile_term(t, slot_of)))
    fn = encd if b.name == "encd" else decd

    def make(k, sources, stats):
        def step(s):
            result = fn(*(f(s) for f in ins))
            values = (result,) if b.name == "encd" else result
            for (kind, x), v in zip(outs, values):
                if kind == "bind":
                    s[x] = v
                elif x(s) != v:
                    return
            k(s)

        return step

    return make
