"""Values, terms, literals, rules and programs shared by every other module.

Runtime values are plain Python objects:

* ``int``   -- 64-bit signed integers (overflow raises :class:`IntegerOverflow`)
* ``float`` -- IEEE-754 doubles
* ``str``   -- interned symbols
* :class:`Pair` -- lexicographically ordered pair built by ``encd``

Ground tuples are Python tuples of these values.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Iterator, Union

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

AGGREGATE_KINDS = ("count", "sum", "avg", "min", "max")
ARITH_OPS = ("+", "-", "*", "/")
COMPARISON_OPS = ("<", "<=", ">", ">=", "=", "!=")


class DatalogError(Exception):
    """Base class of every error raised by the package."""


class EvaluationError(DatalogError):
    rule: "Rule | None" = None

    def with_rule(self, rule: "Rule") -> "EvaluationError":
        if self.rule is None:
            self.rule = rule
            self.args = (f"{self.args[0]} [in rule: {rule}]",) + tuple(self.args[1:])
        return self


class UnboundVariable(EvaluationError):
    pass


class TypeMismatch(EvaluationError):
    pass


class DivisionByZero(EvaluationError):
    pass


class IntegerOverflow(EvaluationError):
    pass


@dataclass(frozen=True, order=True)
class Pair:
    """Two-component value ordered lexicographically on ``(first, second)``."""

    first: object
    second: object

    def __str__(self) -> str:
        return f"({format_value(self.first)}, {format_value(self.second)})"


Value = Union[int, float, str, Pair]


def symbol(name: str) -> str:
    return sys.intern(name)


def variant(v: object) -> str:
    if isinstance(v, bool):
        raise TypeMismatch(f"unsupported value {v!r}")
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "symbol"
    if isinstance(v, Pair):
        return "pair"
    raise TypeMismatch(f"unsupported value {v!r}")


def value_sort_key(v: object) -> tuple:
    """Total order over all values: numbers, then symbols, then pairs."""
    kind = variant(v)
    if kind == "number":
        return (0, v)
    if kind == "symbol":
        return (1, v)
    return (2, value_sort_key(v.first), value_sort_key(v.second))


def tuple_sort_key(t: tuple) -> tuple:
    return tuple(value_sort_key(v) for v in t)


def format_value(v: object) -> str:
    """Render a value in program syntax (symbols that are not bare identifiers get quoted)."""
    if isinstance(v, str):
        if _is_bare_symbol(v):
            return v
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _is_bare_symbol(s: str) -> bool:
    from .parser import RESERVED_WORDS

    return bool(s) and s[0].islower() and s.replace("_", "a").isalnum() and s.isascii() and s not in RESERVED_WORDS


# ---------------------------------------------------------------- terms


@dataclass(frozen=True)
class Var:
    name: str

    @property
    def anonymous(self) -> bool:
        return self.name.startswith("_") and self.name[1:].isdigit()

    def __str__(self) -> str:
        return "_" if self.anonymous else self.name


@dataclass(frozen=True)
class Const:
    value: object

    def __str__(self) -> str:
        return format_value(self.value)


@dataclass(frozen=True)
class Arith:
    op: str
    left: "Term"
    right: "Term"

    def __str__(self) -> str:
        prec = _PRECEDENCE[self.op]
        left = str(self.left)
        right = str(self.right)
        if isinstance(self.left, Arith) and _PRECEDENCE[self.left.op] < prec:
            left = f"({left})"
        if isinstance(self.right, Arith) and _PRECEDENCE[self.right.op] <= prec:
            right = f"({right})"
        return f"{left} {self.op} {right}"


Term = Union[Var, Const, Arith]

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def term_vars(t: Term) -> Iterator[Var]:
    if isinstance(t, Var):
        yield t
    elif isinstance(t, Arith):
        yield from term_vars(t.left)
        yield from term_vars(t.right)


# ---------------------------------------------------------------- literals


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple[Term, ...] = ()

    @property
    def arity(self) -> int:
        return len(self.args)

    def vars(self) -> Iterator[Var]:
        for a in self.args:
            yield from term_vars(a)

    def __str__(self) -> str:
        if not self.args:
            return self.predicate
        return f"{self.predicate}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Negation:
    atom: Atom

    def vars(self) -> Iterator[Var]:
        return self.atom.vars()

    def __str__(self) -> str:
        return f"not {self.atom}"


@dataclass(frozen=True)
class Comparison:
    op: str
    left: Term
    right: Term

    def vars(self) -> Iterator[Var]:
        yield from term_vars(self.left)
        yield from term_vars(self.right)

    def __str__(self) -> str:
        return f"{self.left} {self.op} {self.right}"


@dataclass(frozen=True)
class Builtin:
    """``encd(D, Id, P)`` packs a Pair; ``decd(P, D, Id)`` unpacks one."""

    name: str
    args: tuple[Term, ...]

    def vars(self) -> Iterator[Var]:
        for a in self.args:
            yield from term_vars(a)

    @property
    def inputs(self) -> tuple[Term, ...]:
        return self.args[:2] if self.name == "encd" else self.args[:1]

    @property
    def outputs(self) -> tuple[Term, ...]:
        return self.args[2:] if self.name == "encd" else self.args[1:]

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


BUILTIN_ARITY = {"encd": 3, "decd": 3}


@dataclass(frozen=True)
class CountGuard:
    """Marks an aggregate rule as continuous: the head fires once the number of
    contributions for a stage reaches the cardinality stored in ``predicate``."""

    predicate: str

    def vars(self) -> Iterator[Var]:
        return iter(())

    def __str__(self) -> str:
        return f"@complete({self.predicate})"


Literal = Union[Atom, Negation, Comparison, Builtin, CountGuard]


# ---------------------------------------------------------------- heads, rules


@dataclass(frozen=True)
class AggregateHead:
    """Head with exactly one aggregate position.

    ``agg_var`` is ``None`` for ``count<*>``, which counts body derivations.
    ``position`` is the index of the aggregate among the head arguments.
    """

    predicate: str
    group_args: tuple[Term, ...]
    agg_kind: str
    agg_var: str | None
    position: int = -1

    def __post_init__(self) -> None:
        if self.position < 0:
            object.__setattr__(self, "position", len(self.group_args))

    @property
    def arity(self) -> int:
        return len(self.group_args) + 1

    def vars(self) -> Iterator[Var]:
        for a in self.group_args:
            yield from term_vars(a)
        if self.agg_var is not None:
            yield Var(self.agg_var)

    def __str__(self) -> str:
        parts = [str(a) for a in self.group_args]
        parts.insert(self.position, f"{self.agg_kind}<{self.agg_var or '*'}>")
        return f"{self.predicate}({', '.join(parts)})"


Head = Union[Atom, AggregateHead]


@dataclass(frozen=True)
class Rule:
    head: Head
    body: tuple[Literal, ...] = ()

    @property
    def is_aggregate(self) -> bool:
        return isinstance(self.head, AggregateHead)

    @property
    def count_guard(self) -> CountGuard | None:
        for lit in self.body:
            if isinstance(lit, CountGuard):
                return lit
        return None

    def positive_atoms(self) -> Iterator[tuple[int, Atom]]:
        for i, lit in enumerate(self.body):
            if isinstance(lit, Atom):
                yield i, lit

    def body_vars(self) -> list[Var]:
        seen: dict[Var, None] = {}
        for lit in self.body:
            for v in lit.vars():
                seen.setdefault(v)
        return list(seen)

    def __str__(self) -> str:
        if not self.body:
            return f"{self.head}."
        return f"{self.head} :- {', '.join(str(l) for l in self.body)}."


@dataclass
class Program:
    rules: list[Rule] = field(default_factory=list)
    edb_schemas: dict[str, int] = field(default_factory=dict)
    facts: dict[str, set[tuple]] = field(default_factory=dict)

    def idb_predicates(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rules:
            seen.setdefault(r.head.predicate)
        return list(seen)

    def arities(self) -> dict[str, int]:
        out = dict(self.edb_schemas)
        for r in self.rules:
            out.setdefault(r.head.predicate, r.head.arity)
        return out

    def __str__(self) -> str:
        from .parser import pretty_print

        return pretty_print(self)


# ---------------------------------------------------------------- evaluation


def _check_int(n: int) -> int:
    if n < INT_MIN or n > INT_MAX:
        raise IntegerOverflow(f"integer overflow: {n}")
    return n


def arith(op: str, a: object, b: object) -> Value:
    """Apply an arithmetic operator to two ground values."""
    if variant(a) != "number" or variant(b) != "number":
        raise TypeMismatch(f"cannot apply {op!r} to {a!r} and {b!r}")
    both_int = isinstance(a, int) and isinstance(b, int)
    if op == "+":
        r = a + b
    elif op == "-":
        r = a - b
    elif op == "*":
        r = a * b
    elif op == "/":
        if b == 0:
            raise DivisionByZero(f"division by zero: {a!r} / {b!r}")
        if both_int:
            q, rem = divmod(a, b)
            return _check_int(q) if rem == 0 else a / b
        r = a / b
    else:
        raise ValueError(f"unknown operator {op!r}")
    return _check_int(r) if both_int else r


def eval_term(t: Term, binding: dict[str, object]) -> Value:
    """Evaluate ``t`` under ``binding`` (variable name -> value)."""
    if isinstance(t, Const):
        return t.value
    if isinstance(t, Var):
        try:
            return binding[t.name]
        except KeyError:
            raise UnboundVariable(f"variable {t.name} is unbound") from None
    return arith(t.op, eval_term(t.left, binding), eval_term(t.right, binding))


def compare(op: str, a: object, b: object) -> bool:
    """Compare two ground values; only same-variant (or Int/Float) operands are allowed."""
    if variant(a) != variant(b):
        raise TypeMismatch(f"cannot compare {a!r} with {b!r}")
    if isinstance(a, Pair):
        _check_pair_comparable(a, b)
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    raise ValueError(f"unknown comparison {op!r}")


def _check_pair_comparable(a: Pair, b: Pair) -> None:
    if variant(a.first) != variant(b.first) or variant(a.second) != variant(b.second):
        raise TypeMismatch(f"cannot compare {a} with {b}")


class FactSet:
    """Deduplicated ground tuples keyed by predicate name."""

    def __init__(self, data: dict[str, "set[tuple] | list[tuple]"] | None = None):
        self._data: dict[str, set[tuple]] = {}
        for pred, rows in (data or {}).items():
            for row in rows:
                self.add(pred, row)

    def add(self, predicate: str, row: tuple) -> bool:
        rows = self._data.setdefault(predicate, set())
        if row in rows:
            return False
        rows.add(tuple(row))
        return True

    def update(self, other: "FactSet") -> None:
        for pred, rows in other.items():
            for row in rows:
                self.add(pred, row)

    def get(self, predicate: str) -> set[tuple]:
        return self._data.get(predicate, set())

    def __getitem__(self, predicate: str) -> set[tuple]:
        return self.get(predicate)

    def __contains__(self, predicate: object) -> bool:
        return predicate in self._data

    def predicates(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def sorted_rows(self, predicate: str) -> list[tuple]:
        return sorted(self.get(predicate), key=tuple_sort_key)

    def restrict(self, predicates) -> "FactSet":
        keep = set(predicates)
        return FactSet({p: rows for p, rows in self._data.items() if p in keep})

    def copy(self) -> "FactSet":
        return FactSet({p: set(rows) for p, rows in self._data.items()})

    def __len__(self) -> int:
        return sum(len(rows) for rows in self._data.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FactSet):
            return NotImplemented
        preds = {p for p, r in self._data.items() if r} | {p for p, r in other._data.items() if r}
        return all(self.get(p) == other.get(p) for p in preds)

    def __repr__(self) -> str:
        inner = ", ".join(f"{p}: {len(r)}" for p, r in sorted(self._data.items()))
        return f"FactSet({{{inner}}})"
