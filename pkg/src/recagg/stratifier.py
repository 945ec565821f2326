"""Dependency analysis, stratification and the stage (pre-countable cardinality) check.

An aggregate may sit inside a recursive component only when the component has
a *stage argument*: one argument position per predicate such that every
recursive rule derives its head at ``body stage + k`` for a constant ``k >= 0``,
every aggregate group key contains the head stage, and no aggregate edge lies
on a cycle whose stage offsets are all zero.  Each aggregate group is then tied
to a single stage, and the number of its contributions is fixed once the
earlier stages are complete.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import networkx as nx

from .core_model import (
    AggregateHead,
    Arith,
    Atom,
    Builtin,
    Comparison,
    Const,
    CountGuard,
    DatalogError,
    Negation,
    Program,
    Rule,
    Var,
    term_vars,
)

POSITIVE, NEGATIVE, AGGREGATE = "positive", "negative", "aggregate"

NO_STAGE_ARGUMENT = "no stage argument"
STAGE_NOT_IN_GROUP_KEY = "stage not in group key"
NON_CONSTANT_INCREMENT = "non-constant increment"
NON_INCREASING = "non-increasing stage"

_REASON_RANK = {NO_STAGE_ARGUMENT: 0, STAGE_NOT_IN_GROUP_KEY: 1, NON_CONSTANT_INCREMENT: 2, NON_INCREASING: 3}


class NotStratifiable(DatalogError):
    def __init__(self, message: str, cycle: list[str] | None = None, reason: str | None = None):
        super().__init__(message)
        self.cycle = cycle or []
        self.reason = reason


@dataclass
class DependencyGraph:
    nodes: list[str]
    edges: set[tuple[str, str, str]]

    def kinds(self, src: str, dst: str) -> set[str]:
        return {k for s, d, k in self.edges if s == src and d == dst}

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from((s, d) for s, d, _ in self.edges)
        return g


@dataclass(frozen=True)
class PccEvidence:
    stage_position: int
    increment: int
    guard: tuple[int, ...] = ()

    def __str__(self) -> str:
        s = f"stage_position={self.stage_position} increment=+{self.increment}"
        if self.guard:
            s += f" existential_guard={list(self.guard)}"
        return s


@dataclass(frozen=True)
class PccRejection:
    reason: str
    message: str

    def __str__(self) -> str:
        return f"{self.reason}: {self.message}"


@dataclass
class RuleStaging:
    """Stage bookkeeping for one rule of a staged component.

    ``stage_vars`` maps every variable tied to the head stage ``H`` by constant
    offsets to that offset, so evaluating the rule for stage ``H`` pre-binds
    ``v = H + stage_vars[v]``.  ``atom_offsets`` maps body positions of
    recursive atoms to ``head stage - atom stage``.  ``guard`` holds the body
    positions evaluated existentially (look-back atoms and the literals that
    only constrain them).
    """

    index: int
    base: bool
    head_stage_position: int
    stage_vars: dict[str, int] = field(default_factory=dict)
    atom_offsets: dict[int, int] = field(default_factory=dict)
    guard: frozenset[int] = frozenset()
    increment: int = 0

    @property
    def main_offsets(self) -> set[int]:
        return {d for i, d in self.atom_offsets.items() if i not in self.guard}

    def guard_offsets(self) -> set[int]:
        return {d for i, d in self.atom_offsets.items() if i in self.guard}


@dataclass
class ComponentStaging:
    predicates: list[str]
    stage_positions: dict[str, int]
    rules: dict[int, RuleStaging]
    inner_strata: list[list[str]]

    @property
    def max_main_offset(self) -> int:
        return max((max(rs.main_offsets, default=0) for rs in self.rules.values()), default=0)


@dataclass
class StratumPlan:
    strata: list[list[str]]
    rule_assignment: dict[int, int]
    pcc_evidence: dict[int, PccEvidence]
    kinds: list[str]
    staging: dict[int, ComponentStaging]

    def rules_of(self, stratum: int) -> list[int]:
        return sorted(i for i, s in self.rule_assignment.items() if s == stratum)

    def explain(self, program: Program) -> str:
        lines = []
        for i, preds in enumerate(self.strata):
            lines.append(f"stratum {i} ({self.kinds[i]}): {', '.join(preds)}")
            for idx in self.rules_of(i):
                if idx in self.pcc_evidence:
                    lines.append(f"  pcc rule {idx}: {program.rules[idx]}  [{self.pcc_evidence[idx]}]")
        return "\n".join(lines)


# ---------------------------------------------------------------- graph


def _rule_edges(rule: Rule):
    head = rule.head.predicate
    monotone_head = not rule.is_aggregate or rule.count_guard is not None
    for lit in rule.body:
        if isinstance(lit, Atom):
            yield head, lit.predicate, POSITIVE if monotone_head else AGGREGATE
        elif isinstance(lit, Negation):
            yield head, lit.atom.predicate, NEGATIVE
        elif isinstance(lit, CountGuard):
            yield head, lit.predicate, AGGREGATE


def build_dependency_graph(p: Program) -> DependencyGraph:
    """Edge ``p -> q`` for every body occurrence of ``q`` in a rule for ``p``.

    Negated occurrences are ``negative``; occurrences in a rule with an
    aggregate head are ``aggregate`` (count-guarded aggregates are monotone and
    give ``positive`` edges).
    """
    nodes: dict[str, None] = {}
    for pred in p.edb_schemas:
        nodes.setdefault(pred)
    edges: set[tuple[str, str, str]] = set()
    for rule in p.rules:
        nodes.setdefault(rule.head.predicate)
        for edge in _rule_edges(rule):
            nodes.setdefault(edge[1])
            edges.add(edge)
    return DependencyGraph(list(nodes), edges)


def _first_appearance(p: Program) -> dict[str, int]:
    order: dict[str, int] = {}
    for rule in p.rules:
        order.setdefault(rule.head.predicate, len(order))
        for lit in rule.body:
            atom = lit.atom if isinstance(lit, Negation) else lit
            if isinstance(atom, Atom):
                order.setdefault(atom.predicate, len(order))
    for pred in p.edb_schemas:
        order.setdefault(pred, len(order))
    return order


def _cycle_through(g: nx.DiGraph, src: str, dst: str) -> list[str]:
    back = nx.shortest_path(g, dst, src)
    return [src] + back


def _format_cycle(cycle: list[str], graph: DependencyGraph) -> str:
    parts = [cycle[0]]
    for a, b in zip(cycle, cycle[1:]):
        kinds = graph.kinds(a, b)
        arrow = "-not->" if NEGATIVE in kinds else "-agg->" if AGGREGATE in kinds else "->"
        parts.append(f" {arrow} {b}")
    return "".join(parts)


def stratify(g: DependencyGraph, p: Program) -> StratumPlan:
    """Order the IDB predicates into strata (dependencies first).

    Each strongly connected component becomes one stratum.  Negation inside a
    cycle is rejected; an aggregate inside a cycle is accepted only when the
    component passes the stage analysis.
    """
    order = _first_appearance(p)
    G = g.to_networkx()
    idb = set(p.idb_predicates())
    cond = nx.condensation(G)
    members = cond.graph["mapping"]
    comp_nodes: dict[int, list[str]] = {}
    for node, c in members.items():
        comp_nodes.setdefault(c, []).append(node)
    for c in comp_nodes:
        comp_nodes[c].sort(key=lambda n: order.get(n, len(order)))
    topo = list(
        nx.lexicographical_topological_sort(cond.reverse(copy=True), key=lambda c: order.get(comp_nodes[c][0], 0))
    )

    strata: list[list[str]] = []
    kinds: list[str] = []
    staging: dict[int, ComponentStaging] = {}
    evidence: dict[int, PccEvidence] = {}
    assignment: dict[int, int] = {}
    for c in topo:
        preds = comp_nodes[c]
        if not any(pr in idb for pr in preds):
            continue
        comp = set(preds)
        sub = G.subgraph(comp)
        recursive = len(preds) > 1 or any(G.has_edge(x, x) for x in preds)
        kind = "nonrecursive"
        rule_ids = [i for i, r in enumerate(p.rules) if r.head.predicate in comp]
        if recursive:
            kind = "recursive"
            inner = [(s, d, k) for s, d, k in g.edges if s in comp and d in comp]
            for s, d, k in sorted(inner):
                if k == NEGATIVE:
                    cycle = _cycle_through(sub, s, d)
                    raise NotStratifiable(
                        f"negation in recursion: {_format_cycle(cycle, g)}", cycle=cycle, reason="negation"
                    )
            agg_inner = sorted((s, d) for s, d, k in inner if k == AGGREGATE)
            if agg_inner:
                try:
                    comp_staging = analyze_component(p, comp)
                except NotStratifiable as exc:
                    s, d = agg_inner[0]
                    cycle = _cycle_through(sub, s, d)
                    raise NotStratifiable(
                        f"aggregate in recursion without a stage argument ({exc.reason}): "
                        f"{_format_cycle(cycle, g)}; {exc}",
                        cycle=cycle,
                        reason=exc.reason,
                    ) from None
                kind = "staged"
                staging[len(strata)] = comp_staging
                for idx, rs in comp_staging.rules.items():
                    if p.rules[idx].is_aggregate and not rs.base:
                        evidence[idx] = PccEvidence(
                            comp_staging.stage_positions[p.rules[idx].head.predicate],
                            rs.increment,
                            tuple(sorted(rs.guard)),
                        )
        for i in rule_ids:
            assignment[i] = len(strata)
        strata.append([x for x in preds if x in idb])
        kinds.append(kind)
    return StratumPlan(strata, assignment, evidence, kinds, staging)


def plan_program(p: Program) -> StratumPlan:
    return stratify(build_dependency_graph(p), p)


# ---------------------------------------------------------------- stage analysis


def _head_args(head) -> list:
    if isinstance(head, AggregateHead):
        args: list = list(head.group_args)
        args.insert(head.position, None)
        return args
    return list(head.args)


def _int_const(t) -> int | None:
    if isinstance(t, Const) and isinstance(t.value, int) and not isinstance(t.value, bool):
        return t.value
    return None


def _linear(t) -> tuple[str, int] | None:
    """``V``, ``V + c``, ``V - c`` or ``c + V`` as ``(V, c)``."""
    if isinstance(t, Var):
        return t.name, 0
    if isinstance(t, Arith) and t.op in ("+", "-"):
        if isinstance(t.left, Var) and _int_const(t.right) is not None:
            c = _int_const(t.right)
            return t.left.name, c if t.op == "+" else -c
        if t.op == "+" and isinstance(t.right, Var) and _int_const(t.left) is not None:
            return t.right.name, _int_const(t.left)
    return None


def _offset_edges(rule: Rule) -> list[tuple[str, str, int]]:
    """Edges ``(a, b, c)`` meaning ``a = b + c`` from equality literals."""
    out = []
    for lit in rule.body:
        if isinstance(lit, Comparison) and lit.op == "=":
            for target, source in ((lit.left, lit.right), (lit.right, lit.left)):
                lin = _linear(source)
                if isinstance(target, Var) and lin is not None and lin[0] != target.name:
                    out.append((target.name, lin[0], lin[1]))
    return out


class _Reject(Exception):
    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def _stage_offsets(rule: Rule, head_term) -> dict[str, int]:
    """Offsets of variables relative to the head stage ``H`` (``v = H + off``)."""
    lin = _linear(head_term) if head_term is not None else None
    if lin is None:
        raise _Reject(NO_STAGE_ARGUMENT, f"head stage term {head_term} is not a variable plus a constant")
    anchor, c = lin
    offsets = {anchor: -c}
    adj: dict[str, list[tuple[str, int]]] = {}
    for a, b, k in _offset_edges(rule):
        adj.setdefault(a, []).append((b, -k))  # b = a - k
        adj.setdefault(b, []).append((a, k))  # a = b + k
    queue = deque([anchor])
    while queue:
        v = queue.popleft()
        for w, k in adj.get(v, []):
            off = offsets[v] + k
            if w in offsets:
                if offsets[w] != off:
                    raise _Reject(NON_CONSTANT_INCREMENT, f"inconsistent stage offsets for {w}")
                continue
            offsets[w] = off
            queue.append(w)
    return offsets


def _guard_literals(rule: Rule, lookback: set[int]) -> frozenset[int]:
    """Look-back atoms plus the literals that only constrain their private variables."""
    if not lookback:
        return frozenset()
    main_vars = set()
    for i, lit in rule.positive_atoms():
        if i not in lookback:
            main_vars.update(v.name for v in lit.vars())
    private = set()
    for i in lookback:
        private.update(v.name for v in rule.body[i].vars() if v.name not in main_vars)
    guard = set(lookback)
    changed = True
    while changed:
        changed = False
        for i, lit in enumerate(rule.body):
            if i in guard or isinstance(lit, (Atom, CountGuard)):
                continue
            names = {v.name for v in lit.vars()}
            if names & private:
                guard.add(i)
                changed = True
                if isinstance(lit, Comparison) and lit.op == "=":
                    private.update(n for n in names if n not in main_vars)
                elif isinstance(lit, Builtin):
                    private.update(v.name for t in lit.outputs for v in term_vars(t))
    head_vars = {v.name for v in rule.head.vars()}
    if head_vars & private:
        return frozenset()
    return frozenset(guard)


def _rule_staging(idx: int, rule: Rule, comp: set[str], positions: dict[str, int]) -> RuleStaging:
    head = rule.head
    pos = positions[head.predicate]
    head_args = _head_args(head)
    if isinstance(head, AggregateHead) and pos == head.position:
        raise _Reject(STAGE_NOT_IN_GROUP_KEY, f"stage position {pos} of {head.predicate} holds the aggregate")
    rec = [(i, a) for i, a in rule.positive_atoms() if a.predicate in comp]
    if not rec:
        return RuleStaging(idx, True, pos)
    offsets = _stage_offsets(rule, head_args[pos])
    atom_offsets: dict[int, int] = {}
    for i, atom in rec:
        term = atom.args[positions[atom.predicate]]
        if not isinstance(term, Var):
            raise _Reject(NO_STAGE_ARGUMENT, f"stage argument of {atom} is not a variable")
        if term.name not in offsets:
            raise _Reject(NON_CONSTANT_INCREMENT, f"stage of {atom} is not linked to the head stage by a constant")
        d = -offsets[term.name]
        if d < 0:
            raise _Reject(NON_INCREASING, f"{atom} is at a later stage than the head")
        atom_offsets[i] = d
    by_pred: dict[str, int] = {}
    for i, atom in rec:
        by_pred[atom.predicate] = min(by_pred.get(atom.predicate, atom_offsets[i]), atom_offsets[i])
    lookback = {i for i, atom in rec if atom_offsets[i] > by_pred[atom.predicate]}
    guard = _guard_literals(rule, lookback)
    main = {d for i, d in atom_offsets.items() if i not in guard}
    if rule.is_aggregate and len(main) > 1:
        raise _Reject(NON_CONSTANT_INCREMENT, "aggregate body mixes recursive atoms of different stages")
    return RuleStaging(idx, False, pos, offsets, atom_offsets, guard, min(main))


def _check_positions(p: Program, comp: set[str], rule_ids: list[int], positions: dict[str, int]) -> ComponentStaging:
    rules = {idx: _rule_staging(idx, p.rules[idx], comp, positions) for idx in rule_ids}
    same_stage = nx.DiGraph()
    same_stage.add_nodes_from(comp)
    agg_edges = []
    for idx, rs in rules.items():
        rule = p.rules[idx]
        for i, d in rs.atom_offsets.items():
            if d == 0 and i not in rs.guard:
                src, dst = rule.head.predicate, rule.body[i].predicate
                same_stage.add_edge(src, dst)
                if rule.is_aggregate and rule.count_guard is None:
                    agg_edges.append((src, dst))
    for src, dst in agg_edges:
        if src == dst or nx.has_path(same_stage, dst, src):
            raise _Reject(NON_INCREASING, f"aggregate {src} depends on {dst} within the same stage")
    cond = nx.condensation(same_stage)
    members: dict[int, list[str]] = {}
    for node, c in cond.graph["mapping"].items():
        members.setdefault(c, []).append(node)
    order = {pr: i for i, pr in enumerate(sorted(comp))}
    inner = [
        sorted(members[c])
        for c in nx.lexicographical_topological_sort(cond.reverse(copy=True), key=lambda c: min(map(order.get, members[c])))
    ]
    preds = sorted(comp)
    return ComponentStaging(preds, dict(positions), rules, inner)


def analyze_component(p: Program, comp: set[str]) -> ComponentStaging:
    """Find a consistent stage argument for a recursive component.

    Raises :class:`NotStratifiable` carrying the most specific rejection reason
    when no assignment of stage positions works.
    """
    arities = p.arities()
    preds = sorted(comp)
    rule_ids = [i for i, r in enumerate(p.rules) if r.head.predicate in comp]
    best: _Reject | None = None
    choices = [range(arities[pr]) for pr in preds]
    total = 1
    for c in choices:
        total *= max(len(c), 1)
    if total > 100_000:
        raise NotStratifiable("component too large for stage analysis", reason=NO_STAGE_ARGUMENT)
    for combo in itertools.product(*choices):
        positions = dict(zip(preds, combo))
        try:
            return _check_positions(p, comp, rule_ids, positions)
        except _Reject as exc:
            if best is None or _REASON_RANK[exc.reason] > _REASON_RANK[best.reason]:
                best = exc
    if best is None:
        best = _Reject(NO_STAGE_ARGUMENT, "predicates of the component have no arguments")
    raise NotStratifiable(str(best), reason=best.reason)


def check_pcc(rule: Rule, component: set[str], program: Program) -> PccEvidence | PccRejection:
    """Stage evidence for ``rule`` inside ``component`` (of ``program``), or the reason it has none."""
    if rule not in program.rules:
        program = Program(program.rules + [rule], program.edb_schemas, program.facts)
    idx = program.rules.index(rule)
    try:
        staging = analyze_component(program, set(component))
    except NotStratifiable as exc:
        return PccRejection(exc.reason or NO_STAGE_ARGUMENT, str(exc))
    rs = staging.rules[idx]
    if rs.base:
        return PccRejection(NO_STAGE_ARGUMENT, "rule has no recursive body atom")
    return PccEvidence(staging.stage_positions[rule.head.predicate], rs.increment, tuple(sorted(rs.guard)))


def component_staging(p: Program, comp: set[str]) -> ComponentStaging | None:
    """Stage analysis of a component whose aggregates are all count-guarded, if it has one."""
    try:
        return analyze_component(p, comp)
    except NotStratifiable:
        return None


# ---------------------------------------------------------------- rewrite


def _fresh(name: str, taken: set[str]) -> str:
    while name in taken:
        name += "_"
    taken.add(name)
    return name


def _rename_atoms(lits, names: dict[str, str]):
    out = []
    for lit in lits:
        if isinstance(lit, Atom) and lit.predicate in names:
            out.append(Atom(names[lit.predicate], lit.args))
        elif isinstance(lit, Negation) and lit.atom.predicate in names:
            out.append(Negation(Atom(names[lit.atom.predicate], lit.atom.args)))
        else:
            out.append(lit)
    return tuple(out)


def _rename_head(head, name: str):
    if isinstance(head, AggregateHead):
        return AggregateHead(name, head.group_args, head.agg_kind, head.agg_var, head.position)
    return Atom(name, head.args)


def stratified_rewrite(p: Program) -> Program:
    """Rewrite staged aggregates into count-guarded (monotone) rules.

    For every staged component this adds a lower stratum that replicates the
    component's first stage (``first_<pred>``) and counts, for each recursive
    aggregate rule, the derivations of its body over that first stage
    (``sharedcount_<pred>_<rule>``).  The aggregate rule itself gets an
    ``@complete(sharedcount_...)`` goal: it accumulates continuously and emits
    a stage's groups once that many derivations have been consumed.  Programs
    without staged components are returned unchanged.
    """
    plan = plan_program(p)
    if not plan.staging:
        return p
    taken = set(p.arities())
    new_rules: dict[int, Rule] = {}
    lower: list[Rule] = []
    for s, staging in plan.staging.items():
        first = {pred: _fresh(f"first_{pred}", taken) for pred in staging.predicates}
        for idx in plan.rules_of(s):
            rule = p.rules[idx]
            rs = staging.rules[idx]
            main = tuple(lit for i, lit in enumerate(rule.body) if i not in rs.guard)
            if rs.base or rs.main_offsets == {0}:
                lower.append(Rule(_rename_head(rule.head, first[rule.head.predicate]), _rename_atoms(main, first)))
            if rule.is_aggregate and not rs.base:
                sc = _fresh(f"sharedcount_{rule.head.predicate}_{idx}", taken)
                lower.append(Rule(AggregateHead(sc, (), "count", None), _rename_atoms(main, first)))
                new_rules[idx] = Rule(rule.head, rule.body + (CountGuard(sc),))
    rules = lower + [new_rules.get(i, r) for i, r in enumerate(p.rules)]
    return Program(rules=rules, edb_schemas=dict(p.edb_schemas), facts={k: set(v) for k, v in p.facts.items()})


def auxiliary_predicates(original: Program, rewritten: Program) -> set[str]:
    return set(rewritten.idb_predicates()) - set(original.idb_predicates())
