from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from recagg.core_model import (
    INT_MAX,
    INT_MIN,
    Arith,
    Const,
    DivisionByZero,
    FactSet,
    IntegerOverflow,
    Pair,
    TypeMismatch,
    UnboundVariable,
    Var,
    arith,
    compare,
    eval_term,
    format_value,
    tuple_sort_key,
    value_sort_key,
)

ints = st.integers(min_value=-(2**31), max_value=2**31)
values = st.one_of(
    ints,
    st.floats(allow_nan=False, allow_infinity=False),
    st.sampled_from(["a", "b", "zed", "Quoted name"]),
)


def test_integer_division_is_exact_when_divisible():
    assert arith("/", 6, 3) == 2 and isinstance(arith("/", 6, 3), int)
    assert arith("/", 7, 2) == 3.5


def test_division_by_zero():
    with pytest.raises(DivisionByZero):
        arith("/", 1, 0)
    with pytest.raises(DivisionByZero):
        arith("/", 1.0, 0.0)


def test_integer_overflow_is_detected():
    with pytest.raises(IntegerOverflow):
        arith("+", INT_MAX, 1)
    with pytest.raises(IntegerOverflow):
        arith("*", INT_MIN, -1)


def test_arithmetic_on_symbols_is_rejected():
    with pytest.raises(TypeMismatch):
        arith("+", "a", 1)


def test_mixed_int_float_arithmetic():
    assert arith("*", 100000, 0.9) == pytest.approx(90000.0)
    assert isinstance(arith("+", 1, 2.0), float)


def test_compare_numbers_and_symbols():
    assert compare("<", 1, 1.5)
    assert compare("=", 2, 2.0)
    assert compare("<", "a", "b")
    with pytest.raises(TypeMismatch):
        compare("<", "a", 1)


def test_pairs_order_lexicographically():
    assert compare("<", Pair(1.0, 2), Pair(1.0, 3))
    assert compare("<", Pair(0.5, 9), Pair(1.0, 0))
    with pytest.raises(TypeMismatch):
        compare("<", Pair(1, "a"), Pair(1, 2))


def test_eval_term_and_unbound():
    t = Arith("+", Var("X"), Arith("*", Const(2), Var("Y")))
    assert eval_term(t, {"X": 1, "Y": 3}) == 7
    with pytest.raises(UnboundVariable):
        eval_term(t, {"X": 1})


def test_term_printing_keeps_precedence():
    t = Arith("*", Arith("-", Var("A"), Var("B")), Arith("-", Var("A"), Var("B")))
    assert str(t) == "(A - B) * (A - B)"
    assert str(Arith("-", Var("A"), Arith("-", Var("B"), Var("C")))) == "A - (B - C)"
    assert str(Var("_3")) == "_"


def test_format_value_quotes_non_identifiers():
    assert format_value("abc") == "abc"
    assert format_value("Abc") == '"Abc"'
    assert format_value("not") == '"not"'
    assert format_value(2.5) == "2.5"


def test_factset_deduplicates_and_ignores_empty_relations():
    a = FactSet({"p": [(1,), (1,), (2,)]})
    b = FactSet({"p": [(2,), (1,)], "q": []})
    assert len(a) == 2
    assert a == b
    assert a.sorted_rows("p") == [(1,), (2,)]
    assert "q" not in a.restrict(["p"])


@given(st.lists(values, min_size=1, max_size=8))
def test_value_order_is_total(vs):
    ordered = sorted(vs, key=value_sort_key)
    for a, b in zip(ordered, ordered[1:]):
        assert value_sort_key(a) <= value_sort_key(b)


@given(ints, ints)
def test_integer_addition_commutes(a, b):
    assert arith("+", a, b) == arith("+", b, a)


@given(st.lists(st.tuples(ints, st.sampled_from(["x", "y"])), max_size=10))
def test_tuple_sort_key_sorts_like_python_on_homogeneous_rows(rows):
    assert sorted(rows, key=tuple_sort_key) == sorted(rows)
