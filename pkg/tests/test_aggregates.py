from __future__ import annotations

import math
from functools import reduce

import pytest
from hypothesis import given
from hypothesis import strategies as st

from recagg.aggregates import Accumulator, EmptyGroup, accumulate, aggregate, decd, encd, finalize
from recagg.core_model import IntegerOverflow, INT_MAX, Pair, TypeMismatch

KINDS = ["count", "sum", "avg", "min", "max"]
numbers = st.one_of(st.integers(-10**6, 10**6), st.floats(-1e6, 1e6, allow_nan=False))


def fold(kind, values):
    return reduce(accumulate, values, Accumulator(kind))


def test_group_by_sum():
    groups = {}
    for x, y in [("x", 1), ("x", 2), ("y", 5)]:
        groups[x] = accumulate(groups.get(x, Accumulator("sum")), y)
    assert {k: finalize(a) for k, a in groups.items()} == {"x": 3, "y": 5}


def test_continuous_count_emits_every_prefix():
    acc = Accumulator("count")
    seen = []
    for v in [4, 8, 15]:
        acc = accumulate(acc, v)
        seen.append(acc.running_value)
    assert seen == [1, 2, 3]
    assert finalize(acc) == 3


def test_empty_groups():
    assert finalize(Accumulator("count")) == 0
    for kind in ["sum", "avg", "min", "max"]:
        with pytest.raises(EmptyGroup):
            finalize(Accumulator(kind))
        with pytest.raises(EmptyGroup):
            aggregate(kind, [])


def test_avg_and_sum_types():
    assert aggregate("avg", [1, 2]) == 1.5
    assert isinstance(aggregate("sum", [1, 2]), int)
    assert isinstance(aggregate("sum", [1, 2.0]), float)


def test_sum_overflow():
    with pytest.raises(IntegerOverflow):
        aggregate("sum", [INT_MAX, 1])


def test_min_max_on_symbols_and_pairs():
    assert aggregate("min", ["pear", "apple"]) == "apple"
    assert aggregate("min", [Pair(2.0, 1), Pair(2.0, 0), Pair(3.0, 0)]) == Pair(2.0, 0)
    with pytest.raises(TypeMismatch):
        aggregate("sum", ["a"])
    with pytest.raises(TypeMismatch):
        aggregate("max", [1, "a"])


def test_encd_decd_round_trip():
    p = encd(0.25, 3)
    assert decd(p) == (0.25, 3)
    with pytest.raises(TypeMismatch):
        decd(3)


def test_unknown_kind():
    with pytest.raises(ValueError):
        Accumulator("median")


@given(st.sampled_from(KINDS), st.lists(numbers, min_size=1, max_size=12), st.randoms())
def test_result_does_not_depend_on_order(kind, values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert finalize(fold(kind, values)) == finalize(fold(kind, shuffled))


@given(st.sampled_from(KINDS), st.lists(numbers, min_size=1, max_size=12))
def test_fast_path_matches_fold(kind, values):
    assert aggregate(kind, values) == finalize(fold(kind, values))


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=12))
def test_running_values_are_monotone(values):
    acc_max, acc_min, acc_count = Accumulator("max"), Accumulator("min"), Accumulator("count")
    prev = None
    for v in values:
        acc_max, acc_min, acc_count = accumulate(acc_max, v), accumulate(acc_min, v), accumulate(acc_count, v)
        now = (acc_max.running_value, -acc_min.running_value, acc_count.running_value)
        if prev is not None:
            assert all(a >= b for a, b in zip(now, prev))
        prev = now


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=12))
def test_float_sum_is_correctly_rounded(values):
    assert aggregate("sum", values) == math.fsum(values)
