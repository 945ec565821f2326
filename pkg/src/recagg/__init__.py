"""Bottom-up Datalog with aggregates inside recursion."""

from .core_model import FactSet, Program, Rule
from .engine import EvalOptions, EvalResult, evaluate_program
from .parser import parse_fact_file, parse_program
from .stratifier import NotStratifiable, plan_program, stratified_rewrite

__all__ = [
    "EvalOptions",
    "EvalResult",
    "FactSet",
    "NotStratifiable",
    "Program",
    "Rule",
    "evaluate_program",
    "parse_fact_file",
    "parse_program",
    "plan_program",
    "stratified_rewrite",
]
