"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 parse error, 3 not stratifiable,
4 evaluation error, 5 verification mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core_model import DatalogError, EvaluationError, FactSet, Pair, format_value
from .engine import MODES, EvalOptions, evaluate_program
from .parser import parse_fact_file, parse_facts_tsv, parse_program
from .stratifier import NotStratifiable, plan_program

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_STRATIFY, EXIT_EVAL, EXIT_VERIFY = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _ArgumentParser(prog="recagg", description="Evaluate Datalog programs with aggregates in recursion.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    run = sub.add_parser("run", help="evaluate a program")
    run.add_argument("--program", required=True, type=Path, help="Datalog program file")
    run.add_argument("--facts", action="append", default=[], type=Path, help="CSV fact file (predicate first); repeatable")
    run.add_argument("--fact-dir", type=Path, help="directory of <predicate>.facts tab-separated files")
    run.add_argument("--query", action="append", default=[], help="predicate to print; repeatable")
    run.add_argument("--all", action="store_true", help="print every derived predicate")
    run.add_argument("--mode", choices=MODES, default="completed", help="evaluation strategy (default: completed)")
    run.add_argument("--max-iterations", type=int, default=1000, help="stage and round limit per recursive stratum")
    run.add_argument("--epsilon", type=float, default=0.0, help="tolerance when comparing consecutive stages")
    run.add_argument("--trace", action="store_true", help="print one line per iteration to stderr")
    run.add_argument("--verify", action="store_true", help="cross-check modes and reference implementations")
    run.add_argument("--explain-strata", action="store_true", help="print strata and stage evidence")
    run.add_argument("--memory-opt", action="store_true", help="drop stages that later stages no longer read")
    run.add_argument("--format", choices=("csv", "table"), default="csv", help="output format for query results")
    return ap


def format_csv_value(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    if isinstance(v, str):
        return '"' + v.replace('"', '""') + '"'
    if isinstance(v, Pair):
        return '"' + str(v).replace('"', '""') + '"'
    return str(v)


def render(facts: FactSet, predicates: list[str], fmt: str) -> str:
    out = []
    for pred in predicates:
        rows = facts.sorted_rows(pred)
        if fmt == "csv":
            out.extend(",".join([pred] + [format_csv_value(v) for v in row]) for row in rows)
        else:
            cells = [[format_value(v) for v in row] for row in rows]
            width = [max((len(c[i]) for c in cells), default=0) for i in range(len(cells[0]) if cells else 0)]
            out.append(f"{pred} ({len(rows)} rows)")
            out.extend("  " + "  ".join(c.ljust(w) for c, w in zip(row, width)).rstrip() for row in cells)
    return "\n".join(out)


def _load_facts(args, schema: dict[str, int]) -> FactSet:
    facts = FactSet()
    for path in args.facts:
        facts.update(parse_fact_file(path.read_text(), schema))
    if args.fact_dir is not None:
        for path in sorted(args.fact_dir.glob("*.facts")):
            pred = path.stem
            if pred in schema:
                facts.update(parse_facts_tsv(path.read_text(), pred, schema[pred]))
    return facts


def run(args) -> int:
    if not args.query and not args.all and not args.explain_strata and not args.verify:
        raise UsageError("give at least one --query or --all")
    try:
        program = parse_program(args.program.read_text())
        edb = _load_facts(args, program.arities())
    except OSError as exc:
        raise UsageError(str(exc)) from None
    plan = plan_program(program)
    if args.explain_strata:
        print(plan.explain(program))
    opts = EvalOptions(
        mode=args.mode,
        max_iterations=args.max_iterations,
        convergence_epsilon=args.epsilon,
        trace=args.trace,
        drop_old_stages=args.memory_opt,
    )
    status = EXIT_OK
    if args.verify:
        from .verify import verify_program

        report, _ = verify_program(program, edb, opts)
        print(report)
        if not report.ok:
            status = EXIT_VERIFY
    result = evaluate_program(program, edb, opts)
    for line in result.trace:
        print(line, file=sys.stderr)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    preds = program.idb_predicates() if args.all else args.query
    known = set(program.arities())
    for q in preds:
        if q not in known:
            raise UsageError(f"unknown predicate {q!r}")
    text = render(result.facts, sorted(preds) if args.all else preds, args.format)
    if text:
        print(text)
    return status


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotStratifiable as exc:
        print(f"not stratifiable: {exc}", file=sys.stderr)
        return EXIT_STRATIFY
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except DatalogError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
