"""Cross-checks: mode equivalence and oracle comparison for known program shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_model import FactSet, Pair, Program
from .engine import EvalOptions, EvalResult, evaluate_program
from .oracle import kmeans_reference, markov_reference


def _split(row: tuple) -> tuple[tuple, tuple]:
    exact = tuple(v if not isinstance(v, float) else None for v in row)
    floats = tuple(v for v in row if isinstance(v, float))
    return exact, floats


def facts_close(a: FactSet, b: FactSet, rel: float = 1e-9, predicates=None) -> tuple[bool, str]:
    """Compare two fact sets; float fields may differ by ``rel`` relative error."""
    preds = set(predicates) if predicates is not None else {p for p, r in a.items() if r} | {p for p, r in b.items() if r}
    for p in sorted(preds):
        ra, rb = a.get(p), b.get(p)
        if len(ra) != len(rb):
            return False, f"{p}: {len(ra)} vs {len(rb)} facts"
        ga: dict[tuple, list] = {}
        gb: dict[tuple, list] = {}
        for rows, g in ((ra, ga), (rb, gb)):
            for r in rows:
                k, f = _split(r)
                g.setdefault(k, []).append(f)
        if ga.keys() != gb.keys():
            diff = sorted(ga.keys() ^ gb.keys(), key=repr)[:3]
            return False, f"{p}: rows differ, e.g. {diff}"
        for k in ga:
            for fa, fb in zip(sorted(ga[k]), sorted(gb[k])):
                for x, y in zip(fa, fb):
                    if not math.isclose(x, y, rel_tol=rel, abs_tol=0.0):
                        return False, f"{p}: {x!r} vs {y!r} at {k}"
    return True, ""


@dataclass
class VerifyReport:
    lines: list[str] = field(default_factory=list)
    ok: bool = True

    def check(self, name: str, passed: bool, detail: str = "") -> None:
        self.ok &= passed
        self.lines.append(f"{name}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail and not passed else ""))

    def __str__(self) -> str:
        return "\n".join(self.lines)


def _by_stage(rows, stage_pos: int = 0) -> dict[int, list[tuple]]:
    out: dict[int, list[tuple]] = {}
    for r in rows:
        out.setdefault(r[stage_pos], []).append(r)
    return out


def markov_stages(result: EvalResult) -> dict[int, dict[object, float]]:
    return {j: {r[1]: r[2] for r in rows} for j, rows in _by_stage(result.facts["next"]).items()}


def check_markov(result: EvalResult, mov) -> tuple[bool, str]:
    """Every stage of ``next`` against repeated vector-matrix products."""
    stages = markov_stages(result)
    if not stages:
        return False, "no next facts"
    cities = sorted({r[0] for r in mov} | {r[1] for r in mov}, key=repr)
    ix = {c: i for i, c in enumerate(cities)}
    P = np.zeros((len(cities), len(cities)))
    for a, b, w in mov:
        P[ix[a], ix[b]] += w
    first = min(stages)
    init = np.zeros(len(cities))
    for c, v in stages[first].items():
        init[ix[c]] = v
    last = max(stages)
    hist = markov_reference(P, init, steps=last - first, history=True)
    for j in range(first, last + 1):
        expect = hist[j - first]
        got = stages.get(j, {})
        for c in cities:
            e = float(expect[ix[c]])
            g = got.get(c, 0.0)
            if not math.isclose(g, e, rel_tol=1e-9, abs_tol=1e-9):
                return False, f"stage {j} city {c}: {g!r} vs {e!r}"
    return True, ""


def kmeans_assignments(result: EvalResult) -> dict[int, dict[object, object]]:
    out: dict[int, dict[object, object]] = {}
    for j, pno, pair in result.facts["mindist"]:
        out.setdefault(j, {})[pno] = pair.second if isinstance(pair, Pair) else pair
    return out


def _matrix(rows, key_index: int = 0) -> tuple[list, np.ndarray]:
    keys = sorted({r[key_index] for r in rows}, key=repr)
    dims = sorted({r[1] for r in rows}, key=repr)
    ki = {k: i for i, k in enumerate(keys)}
    di = {d: i for i, d in enumerate(dims)}
    m = np.zeros((len(keys), len(dims)))
    for k, d, v in rows:
        m[ki[k], di[d]] = v
    return keys, m


def check_kmeans(result: EvalResult, points, init) -> tuple[bool, str]:
    """Per-stage assignments of ``mindist`` against the textbook iteration."""
    pnos, X = _matrix(points)
    cnos, C = _matrix(init)
    trace = kmeans_reference(X, C, max_iters=10_000)
    engine = kmeans_assignments(result)
    if not engine:
        return False, "no mindist facts"
    for j in sorted(engine):
        if j >= len(trace.assignments):
            return False, f"engine has stage {j}, reference stopped after {len(trace.assignments)}"
        expect = {p: cnos[trace.assignments[j][i]] for i, p in enumerate(pnos)}
        if engine[j] != expect:
            return False, f"assignment differs at stage {j}"
    last = max(engine)
    if any(not np.array_equal(a, trace.assignments[last]) for a in trace.assignments[last + 1 :]):
        return False, "reference keeps changing assignments after the engine stopped"
    return True, ""


def verify_program(p: Program, edb: FactSet | None, opts: EvalOptions) -> tuple[VerifyReport, EvalResult]:
    """Evaluate in every mode, compare the results, and run oracle checks when the
    program has the Markov (``next``/``mov``) or Lloyd (``mindist``/``point``/``init``) shape."""
    report = VerifyReport()
    results = {}
    for mode in ("completed", "stratified_rewrite", "naive"):
        results[mode] = evaluate_program(
            p, edb, EvalOptions(mode, opts.max_iterations, opts.convergence_epsilon, False, opts.detect_convergence)
        )
    base = results["completed"]
    idb = p.idb_predicates()
    for mode in ("stratified_rewrite", "naive"):
        ok, detail = facts_close(base.facts, results[mode].facts, predicates=idb)
        report.check(f"completed=={mode}", ok, detail)
    all_facts = base.facts
    if "next" in idb and all_facts.get("mov"):
        ok, detail = check_markov(base, all_facts["mov"])
        report.check("engine==oracle", ok, detail)
    elif "mindist" in idb and all_facts.get("point") and all_facts.get("init"):
        ok, detail = check_kmeans(base, all_facts["point"], all_facts["init"])
        report.check("engine==oracle", ok, detail)
    return report, base


__all__ = ["VerifyReport", "check_kmeans", "check_markov", "facts_close", "verify_program"]
