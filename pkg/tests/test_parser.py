from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recagg.core_model import (
    AggregateHead,
    Arith,
    Atom,
    Builtin,
    Comparison,
    Const,
    CountGuard,
    Negation,
    Program,
    Rule,
    Var,
)
from recagg.parser import (
    ArityMismatch,
    DatalogSyntaxError,
    MalformedValue,
    SafetyViolation,
    UnknownPredicate,
    parse_fact_file,
    parse_facts_tsv,
    parse_program,
    parse_value,
    pretty_print,
)

from corpus import bundled


def test_markov_program_structure():
    p = parse_program(bundled("markov.dl"))
    assert [r.head.predicate for r in p.rules] == ["next", "next", "finalstep", "fpop"]
    seed, step = p.rules[0], p.rules[1]
    assert isinstance(seed.head, AggregateHead) and seed.head.agg_kind == "sum" and seed.head.position == 2
    assert step.body[2] == Comparison("=", Var("In"), Arith("*", Var("Pop"), Var("Perc")))
    assert p.edb_schemas == {"mov": 3}


def test_kmeans_program_uses_builtins():
    p = parse_program(bundled("kmeans.dl"))
    mindist = p.rules[2]
    assert isinstance(mindist.body[1], Builtin) and mindist.body[1].name == "encd"
    assert mindist.head.agg_kind == "min"
    assert p.edb_schemas == {"init": 3, "point": 3}


def test_aggregate_in_any_position_and_count_star():
    p = parse_program("q(sum<Y>, X) :- r(X, Y).\nc(count<*>) :- r(_, _).")
    assert p.rules[0].head.position == 0
    assert str(p.rules[0].head) == "q(sum<Y>, X)"
    assert p.rules[1].head.agg_var is None


def test_anonymous_variables_are_distinct():
    rule = parse_program("p(X) :- r(X, _, _).").rules[0]
    a, b = rule.body[0].args[1:]
    assert a != b and a.anonymous and b.anonymous


def test_not_equal_spellings_and_count_guard():
    p = parse_program("p(X) :- r(X, Y), X <> Y, X != 3, @complete(sc).")
    body = p.rules[0].body
    assert body[1].op == "!=" and body[2].op == "!="
    assert body[3] == CountGuard("sc")


def test_facts_become_edb():
    p = parse_program('e(a, 1).\ne(b, -2.5).\ne("Big City", 3).\nq(X) :- e(X, _).')
    assert p.facts == {"e": {("a", 1), ("b", -2.5), ("Big City", 3)}}
    assert p.edb_schemas == {"e": 2}


def test_syntax_error_has_position():
    with pytest.raises(DatalogSyntaxError) as info:
        parse_program("p(X) :- q(X)\nr(Y) :- q(Y).")
    assert info.value.span.line == 2


@pytest.mark.parametrize(
    "text",
    [
        "p(X, Y) :- q(X).",
        "p(X) :- q(Y), not r(X).",
        "p(X) :- q(Y), X > 1.",
        "p(_) :- q(_).",
        "p(X, sum<X>) :- q(X).",
    ],
)
def test_unsafe_rules_are_rejected(text):
    with pytest.raises(SafetyViolation):
        parse_program(text)


def test_equality_and_builtins_bind_variables():
    parse_program("p(Z) :- q(X), Z = X * 2.")
    parse_program("p(D) :- q(P), decd(P, D, _).")


def test_arity_conflict_and_fact_rule_conflict():
    with pytest.raises(DatalogSyntaxError):
        parse_program("p(X) :- q(X).\nr(X) :- q(X, X).")
    with pytest.raises(DatalogSyntaxError):
        parse_program("p(1).\np(X) :- q(X).")


def test_parse_value():
    assert parse_value("12") == 12
    assert parse_value("-3.5") == -3.5
    assert parse_value("1e3") == 1000.0
    assert parse_value(" abc ") == "abc"
    with pytest.raises(MalformedValue):
        parse_value("  ")
    with pytest.raises(MalformedValue):
        parse_value(str(2**63))


def test_fact_file():
    facts = parse_fact_file("% cities\nmov,a,b,0.5\n\nmov,\"b c\",a,1\n", {"mov": 3})
    assert facts["mov"] == {("a", "b", 0.5), ("b c", "a", 1)}
    with pytest.raises(UnknownPredicate):
        parse_fact_file("edge,a,b\n", {"mov": 3})
    with pytest.raises(ArityMismatch):
        parse_fact_file("mov,a,b\n", {"mov": 3})
    with pytest.raises(MalformedValue):
        parse_fact_file("mov,a,,1\n", {"mov": 3})


def test_tsv_facts():
    facts = parse_facts_tsv("a\tb\t1\n# comment\nc\td\t2.5\n", "mov", 3)
    assert facts["mov"] == {("a", "b", 1), ("c", "d", 2.5)}


# round trip: printing a parsed program and parsing it again is the identity

VARS = ["X", "Y", "Z", "W"]
consts = st.one_of(
    st.integers(-1000, 1000),
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    st.sampled_from(["a", "bee", "Cap", "two words"]),
).map(Const)


def arith_over(names):
    leaf = st.one_of(st.sampled_from(names).map(Var), st.integers(0, 9).map(Const))
    return st.recursive(leaf, lambda t: st.builds(Arith, st.sampled_from("+-*/"), t, t), max_leaves=4)


@st.composite
def rules(draw):
    n_atoms = draw(st.integers(1, 3))
    body = []
    bound: list[str] = []
    for _ in range(n_atoms):
        args = draw(st.lists(st.one_of(st.sampled_from(VARS).map(Var), consts), min_size=1, max_size=3))
        body.append(Atom(draw(st.sampled_from(["e", "f", "g"])) + str(len(args)), tuple(args)))
        bound += [a.name for a in args if isinstance(a, Var)]
    if not bound:
        body.append(Atom("h1", (Var("X"),)))
        bound.append("X")
    names = sorted(set(bound))
    if draw(st.booleans()):
        body.append(Comparison(draw(st.sampled_from(["<", "<=", ">", ">=", "!="])), Var(names[0]), draw(arith_over(names))))
    if draw(st.booleans()):
        body.append(Negation(Atom("n1", (Var(draw(st.sampled_from(names))),))))
    head_args = draw(st.lists(st.sampled_from(names).map(Var), min_size=1, max_size=3))
    if draw(st.booleans()):
        kind = draw(st.sampled_from(["count", "sum", "avg", "min", "max"]))
        agg_var = draw(st.sampled_from(names))
        group = tuple(a for a in head_args if a.name != agg_var)
        pos = draw(st.integers(0, len(group)))
        head = AggregateHead("out" + str(len(group) + 1), group, kind, agg_var, pos)
    else:
        head = Atom("res" + str(len(head_args)), tuple(head_args))
    return Rule(head, tuple(body))


@settings(max_examples=150, deadline=None)
@given(st.lists(rules(), min_size=1, max_size=4))
def test_pretty_print_round_trip(rs):
    text = pretty_print(Program(rules=rs))
    again = parse_program(text)
    assert again.rules == rs
    assert pretty_print(again) == text
