"""Two-phase aggregate accumulators and the ``encd``/``decd`` builtins.

The continuous phase folds contributions into an :class:`Accumulator` one at a
time; :func:`finalize` is the completion phase and must only be called once the
caller knows that no contribution is missing.

Sums are kept exactly (``int`` or :class:`fractions.Fraction`) and rounded once
on finalize, so the result does not depend on the order contributions arrive.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

from .core_model import (
    INT_MAX,
    INT_MIN,
    AGGREGATE_KINDS,
    EvaluationError,
    IntegerOverflow,
    Pair,
    TypeMismatch,
    compare,
    variant,
)


class EmptyGroup(EvaluationError):
    pass


@dataclass(frozen=True)
class Accumulator:
    kind: str
    n: int = 0
    total: int | Fraction = 0
    has_float: bool = False
    extremum: object = None

    def __post_init__(self) -> None:
        if self.kind not in AGGREGATE_KINDS:
            raise ValueError(f"unknown aggregate {self.kind!r}")

    @property
    def running_value(self):
        """Value of the continuous aggregate after the contributions so far."""
        if self.kind == "count":
            return self.n
        if self.kind in ("min", "max"):
            return self.extremum
        if self.n == 0:
            return None
        if self.kind == "sum":
            return _round_sum(self.total, self.has_float)
        return float(Fraction(self.total) / self.n)


def _round_sum(total, has_float: bool):
    if has_float:
        return float(total)
    if total < INT_MIN or total > INT_MAX:
        raise IntegerOverflow(f"integer overflow in sum: {total}")
    return int(total)


def accumulate(acc: Accumulator, v) -> Accumulator:
    """Fold one fresh contribution into ``acc`` and return the new state."""
    kind = acc.kind
    if kind == "count":
        return replace(acc, n=acc.n + 1)
    if kind in ("sum", "avg"):
        if variant(v) != "number":
            raise TypeMismatch(f"{kind} over non-numeric value {v!r}")
        if isinstance(v, float):
            return replace(acc, n=acc.n + 1, total=acc.total + Fraction(v), has_float=True)
        return replace(acc, n=acc.n + 1, total=acc.total + v)
    # min / max
    if acc.n == 0:
        variant(v)
        return replace(acc, n=1, extremum=v)
    if kind == "min":
        better = compare("<", v, acc.extremum)
    else:
        better = compare(">", v, acc.extremum)
    return replace(acc, n=acc.n + 1, extremum=v if better else acc.extremum)


def finalize(acc: Accumulator):
    """Completion phase: the aggregate's final value."""
    if acc.kind == "count":
        return acc.n
    if acc.n == 0:
        raise EmptyGroup(f"{acc.kind} over an empty group")
    if acc.kind == "sum":
        return _round_sum(acc.total, acc.has_float)
    if acc.kind == "avg":
        return float(Fraction(acc.total) / acc.n)
    return acc.extremum


def aggregate(kind: str, values) -> object:
    """Accumulate every value of ``values`` and finalize.

    Same result as folding :func:`accumulate` over ``values`` followed by
    :func:`finalize`, without building the intermediate states.
    """
    values = list(values)
    if kind == "count":
        return len(values)
    if not values:
        raise EmptyGroup(f"{kind} over an empty group")
    if kind in ("sum", "avg"):
        total: int | Fraction = 0
        has_float = False
        for v in values:
            if isinstance(v, float):
                has_float = True
                total += Fraction(v)
            elif isinstance(v, int) and not isinstance(v, bool):
                total += v
            else:
                raise TypeMismatch(f"{kind} over non-numeric value {v!r}")
        if kind == "sum":
            return _round_sum(total, has_float)
        return float(Fraction(total) / len(values))
    acc = Accumulator(kind)
    for v in values:
        acc = accumulate(acc, v)
    return finalize(acc)


def encd(d, ident) -> Pair:
    variant(d)
    variant(ident)
    return Pair(d, ident)


def decd(p) -> tuple:
    if not isinstance(p, Pair):
        raise TypeMismatch(f"decd expects a pair, got {p!r}")
    return p.first, p.second
