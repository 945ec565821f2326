"""Bottom-up evaluation, stratum by stratum.

Three modes share the same join machinery:

``completed``
    Horn strata run semi-naive.  A staged component (aggregates inside
    recursion, with a stage argument) is evaluated one stage at a time: every
    aggregate rule enumerates all derivations for the stage, and the end of that
    enumeration is what completes the groups.
``stratified_rewrite``
    The program is first rewritten so each recursive aggregate carries a
    precomputed per-stage cardinality; the middle stratum then runs plain
    semi-naive with continuous accumulators that emit a stage once the count of
    consumed derivations reaches the cardinality.
``naive``
    Every round re-evaluates every rule over the full relations.

Aggregates range over distinct derivations.  A derivation is identified by
the bindings of all named body variables.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable

from .aggregates import Accumulator, accumulate, aggregate, finalize
from .core_model import (
    AggregateHead,
    Atom,
    CountGuard,
    DatalogError,
    EvaluationError,
    FactSet,
    Negation,
    Program,
    Rule,
    TypeMismatch,
    Var,
    tuple_sort_key,
    variant,
)
from .join import EMPTY, JoinPlan, Relation, compile_body
from .parser import ArityMismatch
from .stratifier import (
    ComponentStaging,
    NotStratifiable,
    StratumPlan,
    auxiliary_predicates,
    component_staging,
    plan_program,
    stratified_rewrite,
)

MODES = ("completed", "stratified_rewrite", "naive")

__all__ = [
    "DeltaState",
    "EvalOptions",
    "EvalResult",
    "FactSet",
    "IterationLimitExceeded",
    "NotStratifiable",
    "Relation",
    "check_convergence",
    "evaluate_aggregate_rule_completed",
    "evaluate_program",
    "evaluate_stratified_rewrite",
    "evaluate_stratum_seminaive",
    "extract_final_delta",
]


class IterationLimitExceeded(EvaluationError):
    """Raised only on request; normally the limit is reported on :class:`EvalResult`."""


@dataclass(frozen=True)
class EvalOptions:
    mode: str = "completed"
    max_iterations: int = 1000
    convergence_epsilon: float = 0.0
    trace: bool = False
    detect_convergence: bool = True
    drop_old_stages: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.convergence_epsilon >= 0:
            raise ValueError("convergence_epsilon must be >= 0")


@dataclass
class DeltaState:
    """Bookkeeping of one recursive stratum.

    ``stages`` partitions the facts of staged predicates by stage value;
    ``peak_facts``/``peak_stages`` record the most facts and distinct stages
    held at any one time (relevant when old stages are dropped).
    """

    total: dict[str, set[tuple]] = field(default_factory=dict)
    frontier: dict[str, set[tuple]] = field(default_factory=dict)
    stage: object = None
    stage_position: dict[str, int] = field(default_factory=dict)
    stages: dict[str, dict[object, set[tuple]]] = field(default_factory=dict)
    peak_facts: dict[str, int] = field(default_factory=dict)
    peak_stages: dict[str, int] = field(default_factory=dict)
    iterations: int = 0

    def record_peak(self, pred: str) -> None:
        by_stage = self.stages.get(pred, {})
        n = sum(len(rows) for rows in by_stage.values())
        self.peak_facts[pred] = max(self.peak_facts.get(pred, 0), n)
        self.peak_stages[pred] = max(self.peak_stages.get(pred, 0), sum(1 for rows in by_stage.values() if rows))


@dataclass
class EvalStats:
    attempts: int = 0
    derivations: int = 0
    iterations: int = 0


@dataclass
class EvalResult:
    facts: FactSet
    plan: StratumPlan | None = None
    states: dict[int, DeltaState] = field(default_factory=dict)
    stats: EvalStats = field(default_factory=EvalStats)
    trace: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    limit_exceeded: bool = False

    def __getitem__(self, predicate: str) -> set[tuple]:
        return self.facts[predicate]


# ---------------------------------------------------------------- helpers


def check_convergence(current: Iterable[tuple], previous: Iterable[tuple], epsilon: float, stage_position: int, value_position: int) -> bool:
    """True when two consecutive stages agree.

    Rows are matched on every position except the stage and the aggregate
    value; the key sets must coincide and numeric values may differ by at most
    ``epsilon`` (other values must be equal).
    """

    def keyed(rows):
        out = {}
        for r in rows:
            key = tuple(v for i, v in enumerate(r) if i not in (stage_position, value_position))
            out.setdefault(key, []).append(r[value_position])
        return out

    cur, prev = keyed(current), keyed(previous)
    if not cur or cur.keys() != prev.keys():
        return False
    for key, values in cur.items():
        old = prev[key]
        if len(values) != len(old):
            return False
        for a, b in zip(sorted(values, key=repr), sorted(old, key=repr)):
            if isinstance(a, (int, float)) and isinstance(b, (int, float)):
                if not abs(a - b) <= epsilon:
                    return False
            elif a != b:
                return False
    return True


def extract_final_delta(predicate: str, state: DeltaState) -> FactSet:
    """Facts of ``predicate`` at its highest stage (the last delta of the fixpoint)."""
    by_stage = {s: rows for s, rows in state.stages.get(predicate, {}).items() if rows}
    if by_stage:
        last = max(by_stage)
        return FactSet({predicate: by_stage[last]})
    return FactSet({predicate: state.frontier.get(predicate, set())})


def _stage_values(rows, position: int) -> dict[object, set[tuple]]:
    out: dict[object, set[tuple]] = {}
    for r in rows:
        out.setdefault(r[position], set()).add(r)
    return out


# ---------------------------------------------------------------- evaluator


@dataclass
class _HeadCode:
    rule: Rule
    plan: JoinPlan
    head_fns: list
    agg_slot: int | None = None
    deriv_slots: tuple[int, ...] = ()


class _Evaluator:
    def __init__(self, program: Program, opts: EvalOptions, db: dict[str, Relation]):
        self.program = program
        self.opts = opts
        self.db = db
        self.stats = [0, 0]
        self.iterations = 0
        self.trace: list[str] = []
        self.warnings: list[str] = []
        self.limit_exceeded = False
        self.tick = 1
        self._plans: dict[tuple, _HeadCode] = {}

    # -- relations

    def rel(self, pred: str) -> Relation:
        r = self.db.get(pred)
        if r is None:
            r = self.db[pred] = Relation(pred)
        return r

    def next_tick(self) -> int:
        self.tick += 1
        return self.tick

    def _trace(self, stratum: int, stage, frontier: dict[str, int], before: tuple[int, int]) -> None:
        self.iterations += 1
        if not self.opts.trace:
            return
        fr = ",".join(f"{p}:{n}" for p, n in sorted(frontier.items()))
        st = "-" if stage is None else str(stage)
        self.trace.append(
            f"iter={self.iterations} stratum={stratum} stage={st} frontier={fr or '-'} "
            f"derivations={self.stats[1] - before[1]} attempts={self.stats[0] - before[0]}"
        )

    # -- compilation

    def code(self, idx: int, include: frozenset[int] | None = None, prebound: tuple[str, ...] = (), first: int | None = None) -> _HeadCode:
        key = (idx, include, prebound, first)
        hc = self._plans.get(key)
        if hc is not None:
            return hc
        rule = self.program.rules[idx]
        lits = [(i, lit) for i, lit in enumerate(rule.body) if include is None or i in include]
        plan = compile_body(lits, prebound, first)
        head = rule.head
        if isinstance(head, AggregateHead):
            fns = [plan.term(t) for t in head.group_args]
            agg_slot = plan.slot_of[head.agg_var] if head.agg_var is not None else None
            deriv = tuple(
                sorted(
                    {plan.slot_of[v.name] for _, lit in lits for v in lit.vars()}
                    | {plan.slot_of[n] for n in prebound}
                )
            )
            hc = _HeadCode(rule, plan, fns, agg_slot, deriv)
        else:
            hc = _HeadCode(rule, plan, [plan.term(t) for t in head.args])
        self._plans[key] = hc
        return hc

    def sources(self, rule: Rule, overrides: dict[int, tuple[Relation, int | None]] | None = None):
        src = {}
        for i, lit in enumerate(rule.body):
            if isinstance(lit, Atom):
                src[i] = (self.rel(lit.predicate), None)
            elif isinstance(lit, Negation):
                src[i] = (self.rel(lit.atom.predicate), None)
        if overrides:
            src.update(overrides)
        return src

    # -- firing

    def fire_horn(self, idx: int, sources, include=None, prebound: dict | None = None, first=None, out=None) -> set[tuple]:
        pre = prebound or {}
        hc = self.code(idx, include, tuple(pre), first)
        out = set() if out is None else out
        fns = hc.head_fns
        try:
            hc.plan.run(sources, pre, lambda s: out.add(tuple(f(s) for f in fns)), self.stats)
        except EvaluationError as exc:
            raise exc.with_rule(hc.rule)
        return out

    def derivations(self, idx: int, sources, include=None, prebound: dict | None = None, first=None, sink=None):
        """Collect ``group -> {derivation: value}`` for an aggregate rule."""
        pre = prebound or {}
        hc = self.code(idx, include, tuple(pre), first)
        groups: dict[tuple, dict[tuple, object]] = {} if sink is None else sink
        fns, agg, dslots = hc.head_fns, hc.agg_slot, hc.deriv_slots

        def emit(s):
            group = tuple(f(s) for f in fns)
            groups.setdefault(group, {})[tuple(s[i] for i in dslots)] = None if agg is None else s[agg]

        try:
            hc.plan.run(sources, pre, emit, self.stats)
        except EvaluationError as exc:
            raise exc.with_rule(hc.rule)
        return groups

    def finalize_groups(self, rule: Rule, groups: dict[tuple, dict[tuple, object]]) -> set[tuple]:
        head = rule.head
        out = set()
        try:
            for group, derivs in groups.items():
                value = aggregate(head.agg_kind, derivs.values())
                row = list(group)
                row.insert(head.position, value)
                out.add(tuple(row))
        except EvaluationError as exc:
            raise exc.with_rule(rule)
        return out

    def fire_rule(self, idx: int, sources=None, include=None, prebound=None) -> set[tuple]:
        rule = self.program.rules[idx]
        sources = sources if sources is not None else self.sources(rule)
        if rule.is_aggregate:
            return self.finalize_groups(rule, self.derivations(idx, sources, include, prebound))
        return self.fire_horn(idx, sources, include, prebound)

    def insert(self, pred: str, rows: Iterable[tuple], stamp: int) -> set[tuple]:
        rel = self.rel(pred)
        return {r for r in rows if rel.add(r, stamp)}

    # -- strata

    def run_plan(self, plan: StratumPlan, states: dict[int, DeltaState]) -> None:
        for s, preds in enumerate(plan.strata):
            rule_ids = plan.rules_of(s)
            kind = plan.kinds[s]
            if kind == "nonrecursive":
                self.eval_nonrecursive(s, rule_ids)
            elif kind == "staged":
                if self.opts.mode == "stratified_rewrite":
                    raise DatalogError("stratified_rewrite evaluation needs a rewritten program")
                states[s] = self.eval_staged(s, plan.staging[s], rule_ids)
            else:
                comp = set(preds)
                if self.opts.mode == "stratified_rewrite" and any(self.program.rules[i].count_guard for i in rule_ids):
                    states[s] = self.eval_count_guarded(s, comp, rule_ids)
                else:
                    states[s] = self.eval_recursive(s, comp, rule_ids)

    def eval_nonrecursive(self, s: int, rule_ids: list[int]) -> None:
        before = tuple(self.stats)
        stamp = self.next_tick()
        sizes = {}
        for idx in rule_ids:
            rule = self.program.rules[idx]
            new = self.insert(rule.head.predicate, self.fire_rule(idx), stamp)
            sizes[rule.head.predicate] = sizes.get(rule.head.predicate, 0) + len(new)
        self._trace(s, None, sizes, before)

    def horn_fixpoint(
        self,
        s: int,
        rule_ids: list[int],
        recursive: dict[int, list[int]],
        stage=None,
        prebound: dict[int, dict] | None = None,
        include: dict[int, frozenset[int]] | None = None,
        head_filter=None,
        limit: bool = True,
    ) -> dict[str, set[tuple]]:
        """Semi-naive (or naive) fixpoint of Horn rules.

        ``recursive[idx]`` lists the body positions that read predicates being
        computed here; only those get delta variants.  Returns all new facts.
        """
        prebound = prebound or {}
        include = include or {}
        naive = self.opts.mode == "naive"
        derived: dict[str, set[tuple]] = {}
        rules = self.program.rules

        def keep(idx, rows):
            if head_filter is None:
                return rows
            return {r for r in rows if head_filter(rules[idx].head.predicate, r)}

        before = tuple(self.stats)
        stamp = self.next_tick()
        first: dict[str, set[tuple]] = {}
        for idx in rule_ids:
            rows = keep(idx, self.fire_horn(idx, self.sources(rules[idx]), include.get(idx), prebound.get(idx)))
            first.setdefault(rules[idx].head.predicate, set()).update(rows)
        delta = {p: self.insert(p, rows, stamp) for p, rows in first.items()}
        delta = {p: r for p, r in delta.items() if r}
        rounds = 0
        while delta:
            for p, rows in delta.items():
                derived.setdefault(p, set()).update(rows)
            self._trace(s, stage, {p: len(r) for p, r in delta.items()}, before)
            rounds += 1
            if limit and rounds > self.opts.max_iterations:
                self.flag_limit(f"stratum {s}: no fixpoint after {self.opts.max_iterations} rounds")
                break
            before = tuple(self.stats)
            new: dict[str, set[tuple]] = {}
            if naive:
                for idx in rule_ids:
                    rows = keep(idx, self.fire_horn(idx, self.sources(rules[idx]), include.get(idx), prebound.get(idx)))
                    pred = rules[idx].head.predicate
                    new.setdefault(pred, set()).update(r for r in rows if r not in self.rel(pred))
            else:
                delta_rel = {p: Relation(p, rows) for p, rows in delta.items()}
                for idx in rule_ids:
                    rule = rules[idx]
                    rec = [i for i in recursive.get(idx, []) if rule.body[i].predicate in delta_rel]
                    all_rec = recursive.get(idx, [])
                    out: set[tuple] = set()
                    for i in rec:
                        over = {i: (delta_rel[rule.body[i].predicate], None)}
                        for j in all_rec:
                            if j < i:
                                over[j] = (self.rel(rule.body[j].predicate), stamp)
                        self.fire_horn(idx, self.sources(rule, over), include.get(idx), prebound.get(idx), first=i, out=out)
                    pred = rule.head.predicate
                    new.setdefault(pred, set()).update(r for r in keep(idx, out) if r not in self.rel(pred))
            stamp = self.next_tick()
            delta = {p: self.insert(p, rows, stamp) for p, rows in new.items()}
            delta = {p: r for p, r in delta.items() if r}
        return derived

    def flag_limit(self, message: str) -> None:
        self.limit_exceeded = True
        self.warnings.append(f"iteration limit reached: {message}")

    def eval_recursive(self, s: int, comp: set[str], rule_ids: list[int]) -> DeltaState:
        rules = self.program.rules
        recursive = {
            idx: [i for i, a in rules[idx].positive_atoms() if a.predicate in comp] for idx in rule_ids
        }
        self.horn_fixpoint(s, rule_ids, recursive)
        state = DeltaState(iterations=self.iterations)
        for p in comp:
            state.total[p] = set(self.rel(p).rows)
            state.frontier[p] = set()
        # the last non-empty delta per predicate
        last_stamp = {p: max(self.rel(p).rows.values(), default=None) for p in comp}
        for p in comp:
            if last_stamp[p] is not None:
                state.frontier[p] = {r for r, t in self.rel(p).rows.items() if t == last_stamp[p]}
        return state

    # -- staged components

    def eval_staged(self, s: int, staging: ComponentStaging, rule_ids: list[int]) -> DeltaState:
        rules = self.program.rules
        opts = self.opts
        comp = set(staging.predicates)
        pos = staging.stage_positions
        state = DeltaState(stage_position=dict(pos))
        for p in comp:
            state.stages[p] = {}
        base = [i for i in rule_ids if staging.rules[i].base]
        step_rules = [i for i in rule_ids if not staging.rules[i].base]
        agg_preds = {rules[i].head.predicate for i in step_rules if rules[i].is_aggregate}

        seeds: dict[object, dict[str, set[tuple]]] = {}
        for idx in base:
            pred = rules[idx].head.predicate
            for row in self.fire_rule(idx):
                stage = row[pos[pred]]
                if variant(stage) != "number":
                    raise TypeMismatch(f"stage value {stage!r} of {pred} is not a number").with_rule(rules[idx])
                seeds.setdefault(stage, {}).setdefault(pred, set()).add(row)
        if not seeds:
            return state
        first_stage = min(seeds)
        offsets = sorted({d for i in step_rules for d in staging.rules[i].main_offsets if d > 0})
        keep_back = staging.max_main_offset

        heap = sorted(seeds)
        seen_stages: set = set()
        evaluated = 0
        while heap:
            H = heapq.heappop(heap)
            if H in seen_stages:
                continue
            seen_stages.add(H)
            tentative = evaluated >= 1 and evaluated - 1 >= opts.max_iterations
            before = tuple(self.stats)
            enabled = {idx: self.guard_holds(idx, staging, H, first_stage) for idx in step_rules}
            if opts.drop_old_stages:
                self.drop_stages(state, comp, lambda st: st < H - keep_back)
            produced = self.eval_stage(s, H, staging, step_rules, enabled, seeds.get(H, {}), agg_preds, state)
            if tentative:
                if any(produced.values()):
                    for p, rows in produced.items():
                        self.rel(p).discard(rows)
                        state.stages[p].pop(H, None)
                    self.flag_limit(f"stratum {s}: stage {H} would exceed {opts.max_iterations} iterations")
                break
            evaluated += 1
            for p in comp:
                state.record_peak(p)
            self._trace(s, H, {p: len(r) for p, r in produced.items() if r}, before)
            if any(produced.values()):
                state.stage = H
                state.frontier = {p: set(r) for p, r in produced.items() if r}
                for d in offsets:
                    heapq.heappush(heap, H + d)
        for p in comp:
            state.total[p] = set(self.rel(p).rows)
        state.iterations = evaluated
        return state

    def drop_stages(self, state: DeltaState, comp: set[str], old) -> None:
        for p in comp:
            by_stage = state.stages[p]
            for st in [st for st in by_stage if old(st)]:
                self.rel(p).discard(by_stage.pop(st))

    def stage_bindings(self, rs, H) -> dict[str, object]:
        return {v: H + off for v, off in rs.stage_vars.items()}

    def guard_holds(self, idx: int, staging: ComponentStaging, H, first_stage) -> bool:
        rs = staging.rules[idx]
        if not rs.guard:
            return True
        if any(H - d < first_stage for d in rs.guard_offsets()):
            return True
        rule = self.program.rules[idx]
        pre = self.stage_bindings(rs, H)
        hc = self.code(idx, None, tuple(pre))
        found = []

        class _Found(Exception):
            pass

        def emit(_):
            found.append(True)
            raise _Found

        try:
            hc.plan.run(self.sources(rule), pre, emit, self.stats)
        except _Found:
            pass
        except EvaluationError as exc:
            raise exc.with_rule(rule)
        return bool(found)

    def eval_stage(self, s, H, staging: ComponentStaging, step_rules, enabled, seeds, agg_preds, state) -> dict[str, set[tuple]]:
        rules = self.program.rules
        opts = self.opts
        pos = staging.stage_positions
        naive = opts.mode == "naive"
        produced: dict[str, set[tuple]] = {p: set() for p in staging.predicates}
        stamp = self.next_tick()
        for p, rows in seeds.items():
            produced[p] |= self.insert(p, rows, stamp)

        def head_filter(pred, row):
            return row[pos[pred]] == H

        for inner in staging.inner_strata:
            members = set(inner)
            ids = [i for i in step_rules if rules[i].head.predicate in members and enabled[i]]
            include = {i: frozenset(j for j in range(len(rules[i].body)) if j not in staging.rules[i].guard) for i in ids}
            prebound = {} if naive else {i: self.stage_bindings(staging.rules[i], H) for i in ids}
            agg_rows: dict[str, set[tuple]] = {}
            for idx in ids:
                rule = rules[idx]
                if not rule.is_aggregate:
                    continue
                groups = self.derivations(idx, self.sources(rule), include[idx], prebound.get(idx))
                rows = self.finalize_groups(rule, groups)
                if naive:
                    rows = {r for r in rows if head_filter(rule.head.predicate, r)}
                agg_rows.setdefault(rule.head.predicate, set()).update(rows)
            stamp = self.next_tick()
            for p, rows in agg_rows.items():
                if opts.detect_convergence and p in agg_preds and self.converged(p, rows, H, staging, state):
                    continue
                produced[p] |= self.insert(p, rows, stamp)
            horn = [i for i in ids if not rules[i].is_aggregate]
            if horn:
                recursive = {
                    i: [j for j, d in staging.rules[i].atom_offsets.items() if d == 0 and j in include[i] and rules[i].body[j].predicate in members]
                    for i in horn
                }
                derived = self.horn_fixpoint(
                    s, horn, recursive, stage=H, prebound=prebound, include=include,
                    head_filter=head_filter if naive else None,
                )
                for p, rows in derived.items():
                    produced[p] |= rows
        for p, rows in produced.items():
            if rows:
                state.stages[p].setdefault(H, set()).update(rows)
        return produced

    def converged(self, pred: str, rows: set[tuple], H, staging: ComponentStaging, state: DeltaState) -> bool:
        earlier = [st for st, r in state.stages[pred].items() if st < H and r]
        if not earlier:
            return False
        prev = state.stages[pred][max(earlier)]
        value_pos = next(r.head.position for r in self.program.rules if r.head.predicate == pred and r.is_aggregate)
        return check_convergence(rows, prev, self.opts.convergence_epsilon, staging.stage_positions[pred], value_pos)

    # -- count-guarded components (rewritten programs)

    def eval_count_guarded(self, s: int, comp: set[str], rule_ids: list[int]) -> DeltaState:
        rules = self.program.rules
        opts = self.opts
        staging = component_staging(self.program, comp)
        if staging is None:
            raise NotStratifiable(f"count-guarded component {sorted(comp)} has no stage argument")
        pos = staging.stage_positions
        state = DeltaState(stage_position=dict(pos))
        base = [i for i in rule_ids if staging.rules[i].base]
        step_rules = [i for i in rule_ids if not staging.rules[i].base]
        agg_preds = {rules[i].head.predicate for i in step_rules if rules[i].is_aggregate}
        include = {i: frozenset(j for j in range(len(rules[i].body)) if j not in staging.rules[i].guard) for i in step_rules}
        recursive = {i: [j for j, a in rules[i].positive_atoms() if a.predicate in comp and j in include[i]] for i in step_rules}

        before = tuple(self.stats)
        stamp = self.next_tick()
        delta: dict[str, set[tuple]] = {}
        for idx in base:
            pred = rules[idx].head.predicate
            delta.setdefault(pred, set()).update(self.insert(pred, self.fire_rule(idx), stamp))
        seed_stages = [r[pos[p]] for p, rows in delta.items() for r in rows]
        first_stage = min(seed_stages) if seed_stages else None

        acc: dict[int, dict[object, dict[tuple, Accumulator]]] = {i: {} for i in step_rules}
        counts: dict[int, dict[object, int]] = {i: {} for i in step_rules}
        done: dict[int, set] = {i: set() for i in step_rules}
        seen: dict[int, set[tuple]] = {i: set() for i in step_rules}
        stages_of: dict[str, set] = {p: set() for p in agg_preds}
        overshoot_warned: set = set()
        guard_cache: dict[tuple[int, object], bool] = {}

        def shared_count(rule: Rule):
            rows = self.rel(rule.count_guard.predicate).rows
            return next(iter(rows))[0] if rows else None

        def guard_ok(idx, h):
            if first_stage is None:
                return True
            key = (idx, h)
            if key not in guard_cache:
                guard_cache[key] = self.guard_holds(idx, staging, h, first_stage)
            return guard_cache[key]

        def run_rules(overrides_for) -> dict[str, set[tuple]]:
            out: dict[str, set[tuple]] = {}
            for idx in step_rules:
                rule = rules[idx]
                pred = rule.head.predicate
                for over, first in overrides_for(idx):
                    src = self.sources(rule, over)
                    if not rule.is_aggregate:
                        rows = self.fire_horn(idx, src, include[idx], first=first)
                        keep = {r for r in rows if r not in self.rel(pred)}
                        if staging.rules[idx].guard:
                            keep = {r for r in keep if guard_ok(idx, r[pos[pred]])}
                        out.setdefault(pred, set()).update(keep)
                        continue
                    groups = self.derivations(idx, src, include[idx], first=first)
                    sc = shared_count(rule)
                    touched = set()
                    for group, derivs in groups.items():
                        h = group[pos[pred] if pos[pred] < rule.head.position else pos[pred] - 1]
                        for did, value in derivs.items():
                            if did in seen[idx]:
                                continue
                            seen[idx].add(did)
                            if h in done[idx]:
                                if (idx, h) not in overshoot_warned:
                                    overshoot_warned.add((idx, h))
                                    self.warnings.append(
                                        f"rule {idx}: stage {h} received more derivations than its precomputed count"
                                    )
                                continue
                            g = acc[idx].setdefault(h, {})
                            try:
                                g[group] = accumulate(g.get(group, Accumulator(rule.head.agg_kind)), value)
                            except EvaluationError as exc:
                                raise exc.with_rule(rule)
                            counts[idx][h] = counts[idx].get(h, 0) + 1
                            touched.add(h)
                    for h in sorted(touched):
                        if sc is None or counts[idx][h] != sc:
                            continue
                        done[idx].add(h)
                        emitted = set()
                        for group, a in acc[idx].pop(h).items():
                            row = list(group)
                            row.insert(rule.head.position, finalize(a))
                            emitted.add(tuple(row))
                        if not guard_ok(idx, h):
                            continue
                        out.setdefault(pred, set()).update(r for r in emitted if r not in self.rel(pred))
            return out

        def admit(new: dict[str, set[tuple]]) -> dict[str, set[tuple]]:
            for p in sorted(new):
                if p not in agg_preds:
                    continue
                by_stage = _stage_values(new[p], pos[p])
                kept = set()
                for h in sorted(by_stage):
                    rows = by_stage[h]
                    if opts.detect_convergence and self.converged_rows(p, rows, h, pos[p]):
                        continue
                    if h not in stages_of[p] and len(stages_of[p] | self.stages_in(p, pos[p])) >= opts.max_iterations + 1:
                        self.flag_limit(f"stratum {s}: stage {h} of {p} would exceed {opts.max_iterations} iterations")
                        continue
                    stages_of[p].add(h)
                    kept |= rows
                new[p] = kept
            return new

        delta = {p: r for p, r in delta.items() if r}
        new = admit(run_rules(lambda idx: [(None, None)]))
        stamp = self.next_tick()
        for p, rows in new.items():
            delta.setdefault(p, set()).update(self.insert(p, rows, stamp))
        delta = {p: r for p, r in delta.items() if r}
        last_stamp = stamp
        while delta:
            self._trace(s, None, {p: len(r) for p, r in delta.items()}, before)
            before = tuple(self.stats)
            delta_rel = {p: Relation(p, rows) for p, rows in delta.items()}

            def variants(idx, delta_rel=delta_rel, last_stamp=last_stamp):
                rule = rules[idx]
                out = []
                for i in recursive[idx]:
                    if rule.body[i].predicate not in delta_rel:
                        continue
                    over = {i: (delta_rel[rule.body[i].predicate], None)}
                    for j in recursive[idx]:
                        if j < i:
                            over[j] = (self.rel(rule.body[j].predicate), last_stamp)
                    out.append((over, i))
                return out

            new = admit(run_rules(variants))
            last_stamp = self.next_tick()
            delta = {p: self.insert(p, rows, last_stamp) for p, rows in new.items()}
            delta = {p: r for p, r in delta.items() if r}
        for p in comp:
            state.total[p] = set(self.rel(p).rows)
            state.stages[p] = _stage_values(self.rel(p).rows, pos[p])
        return state

    def stages_in(self, pred: str, position: int) -> set:
        return {r[position] for r in self.rel(pred).rows}

    def converged_rows(self, pred: str, rows: set[tuple], h, stage_pos: int) -> bool:
        existing = _stage_values(self.rel(pred).rows, stage_pos)
        earlier = [st for st in existing if st < h]
        if not earlier:
            return False
        value_pos = next(r.head.position for r in self.program.rules if r.head.predicate == pred and r.is_aggregate)
        return check_convergence(rows, existing[max(earlier)], self.opts.convergence_epsilon, stage_pos, value_pos)


# ---------------------------------------------------------------- entry points


def _load_db(p: Program, edb: FactSet | None) -> dict[str, Relation]:
    arities = p.arities()
    idb = set(p.idb_predicates())
    db: dict[str, Relation] = {}
    sources = [p.facts.items()]
    if edb is not None:
        sources.append(edb.items())
    for items in sources:
        for pred, rows in items:
            if pred in idb:
                raise EvaluationError(f"facts supplied for derived predicate {pred}")
            rel = db.setdefault(pred, Relation(pred))
            for row in rows:
                row = tuple(row)
                if pred in arities and len(row) != arities[pred]:
                    raise ArityMismatch(f"{pred} expects {arities[pred]} arguments, got {len(row)}: {row}")
                for v in row:
                    variant(v)
                rel.add(row, 0)
    return db


def _result(ev: _Evaluator, plan: StratumPlan | None, states, strip: set[str] = frozenset()) -> EvalResult:
    facts = FactSet()
    for pred, rel in ev.db.items():
        if pred in strip:
            continue
        for row in rel.rows:
            facts.add(pred, row)
    stats = EvalStats(ev.stats[0], ev.stats[1], ev.iterations)
    return EvalResult(facts, plan, states, stats, ev.trace, ev.warnings, ev.limit_exceeded)


def evaluate_program(p: Program, edb: FactSet | None = None, opts: EvalOptions | None = None) -> EvalResult:
    """Evaluate every stratum of ``p`` over its own facts plus ``edb``.

    The result holds EDB and IDB facts; ``limit_exceeded`` is set (and a
    warning recorded) when a recursive stratum was cut off by
    ``max_iterations``.
    """
    opts = opts or EvalOptions()
    if opts.mode == "stratified_rewrite":
        rewritten = stratified_rewrite(p)
        result = evaluate_stratified_rewrite(rewritten, edb, opts)
        aux = auxiliary_predicates(p, rewritten)
        result.facts = result.facts.restrict(set(result.facts.predicates()) - aux)
        result.plan = plan_program(p)
        return result
    plan = plan_program(p)
    ev = _Evaluator(p, opts, _load_db(p, edb))
    states: dict[int, DeltaState] = {}
    ev.run_plan(plan, states)
    return _result(ev, plan, states)


def evaluate_stratified_rewrite(p_rewritten: Program, edb: FactSet | None = None, opts: EvalOptions | None = None) -> EvalResult:
    """Evaluate a program produced by :func:`stratified_rewrite`.

    Lower strata compute the per-stage cardinalities; count-guarded rules
    accumulate continuously and emit a stage when its count is reached.
    """
    opts = opts or EvalOptions(mode="stratified_rewrite")
    if opts.mode != "stratified_rewrite":
        opts = EvalOptions(
            "stratified_rewrite", opts.max_iterations, opts.convergence_epsilon, opts.trace,
            opts.detect_convergence, opts.drop_old_stages,
        )
    plan = plan_program(p_rewritten)
    ev = _Evaluator(p_rewritten, opts, _load_db(p_rewritten, edb))
    states: dict[int, DeltaState] = {}
    ev.run_plan(plan, states)
    return _result(ev, plan, states)


def _standalone(rules: list[Rule], relations: FactSet, opts: EvalOptions) -> _Evaluator:
    prog = Program(list(rules))
    db = {pred: Relation(pred, rows) for pred, rows in relations.items()}
    return _Evaluator(prog, opts, db)


def evaluate_stratum_seminaive(rules: list[Rule], state: DeltaState, relations: FactSet, opts: EvalOptions | None = None) -> FactSet:
    """Semi-naive fixpoint of Horn ``rules`` over ``relations``.

    Updates ``state`` (totals, last frontier, iteration count) and returns the
    facts of the rules' head predicates.
    """
    opts = opts or EvalOptions()
    if any(r.is_aggregate for r in rules):
        raise DatalogError("evaluate_stratum_seminaive takes Horn rules only")
    ev = _standalone(rules, relations, opts)
    heads = {r.head.predicate for r in rules}
    st = ev.eval_recursive(0, heads, list(range(len(rules))))
    state.total.update(st.total)
    state.frontier.update(st.frontier)
    state.iterations += ev.iterations
    return FactSet({p: ev.rel(p).rows.keys() for p in heads})


def evaluate_aggregate_rule_completed(rule: Rule, frontier: FactSet, relations: FactSet) -> FactSet:
    """All groups of an aggregate rule, finalized once its join is exhausted.

    Body atoms whose predicate appears in ``frontier`` read the frontier facts;
    the others read ``relations``.
    """
    if not rule.is_aggregate:
        raise DatalogError("evaluate_aggregate_rule_completed needs an aggregate rule")
    ev = _standalone([rule], relations, EvalOptions())
    front = {p: Relation(p, rows) for p, rows in frontier.items()}
    over = {i: (front[a.predicate], None) for i, a in rule.positive_atoms() if a.predicate in front}
    rows = ev.finalize_groups(rule, ev.derivations(0, ev.sources(rule, over)))
    return FactSet({rule.head.predicate: rows})
