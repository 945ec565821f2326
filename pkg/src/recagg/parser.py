"""Program and fact-file parsing, safety checking and pretty-printing.

Program grammar (EBNF; whitespace and ``% ...`` comments are ignored)::

    program    = { clause } ;
    clause     = head [ ":-" literal { "," literal } ] "." ;
    head       = IDENT [ "(" head_arg { "," head_arg } ")" ] ;
    head_arg   = AGG "<" ( VAR | "*" ) ">" | term ;
    literal    = "not" atom
               | "@complete" "(" IDENT ")"
               | ("encd" | "decd") "(" term "," term "," term ")"
               | atom
               | term CMP term ;
    atom       = IDENT [ "(" term { "," term } ")" ] ;
    term       = product { ("+" | "-") product } ;
    product    = unary { ("*" | "/") unary } ;
    unary      = "-" unary | primary ;
    primary    = NUMBER | VAR | IDENT | STRING | "(" term ")" ;

    AGG   = "count" | "sum" | "avg" | "min" | "max" ;
    CMP   = "<" | "<=" | ">" | ">=" | "=" | "!=" | "<>" ;
    IDENT = [a-z][A-Za-z0-9_]* ;           (predicates and symbol constants)
    VAR   = [A-Z_][A-Za-z0-9_]* ;          ("_" is anonymous)
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass

from .core_model import (
    AGGREGATE_KINDS,
    BUILTIN_ARITY,
    INT_MAX,
    INT_MIN,
    AggregateHead,
    Arith,
    Atom,
    Builtin,
    Comparison,
    Const,
    CountGuard,
    DatalogError,
    FactSet,
    Negation,
    Program,
    Rule,
    Var,
    symbol,
    term_vars,
)

RESERVED_WORDS = frozenset({"not"})


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    length: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


class DatalogSyntaxError(DatalogError):
    def __init__(self, span: SourceSpan, message: str):
        super().__init__(f"{span}: {message}")
        self.span = span
        self.message = message


class SafetyViolation(DatalogError):
    def __init__(self, rule: Rule, variable: str, reason: str = ""):
        msg = f"unsafe variable {variable} in rule: {rule}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)
        self.rule = rule
        self.variable = variable


class ArityMismatch(DatalogError):
    pass


class UnknownPredicate(DatalogError):
    pass


class MalformedValue(DatalogError):
    pass


# ---------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|%[^\n]*)
  | (?P<number>\d+\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\d+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[a-z][A-Za-z0-9_]*)
  | (?P<var>[A-Z_][A-Za-z0-9_]*)
  | (?P<op>:-|<=|>=|!=|<>|@complete|[<>=+\-*/(),.])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    span: SourceSpan


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    line, line_start = 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        span = SourceSpan(line, pos - line_start + 1, 1)
        if m is None:
            raise DatalogSyntaxError(span, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        tok = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, tok, SourceSpan(span.line, span.column, len(tok))))
        newlines = tok.count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + tok.rindex("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", SourceSpan(line, pos - line_start + 1, 0)))
    return tokens


def _parse_number(text: str):
    if re.fullmatch(r"\d+", text):
        return int(text)
    return float(text)


def _unescape(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s[1:-1])


# ---------------------------------------------------------------- parser


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0
        self.anon = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> _Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Token:
        if self.tok.text != text or self.tok.kind not in ("op",):
            raise DatalogSyntaxError(self.tok.span, f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def at(self, text: str) -> bool:
        return self.tok.kind == "op" and self.tok.text == text

    # clauses --------------------------------------------------------

    def clauses(self) -> list[tuple[Rule, SourceSpan]]:
        out = []
        while self.tok.kind != "eof":
            start = self.tok.span
            self.anon = 0
            head = self.head()
            body: list = []
            if self.at(":-"):
                self.advance()
                body.append(self.literal())
                while self.at(","):
                    self.advance()
                    body.append(self.literal())
            self.expect(".")
            out.append((Rule(head, tuple(body)), start))
        return out

    def head(self):
        if self.tok.kind != "ident" or self.tok.text in RESERVED_WORDS:
            raise DatalogSyntaxError(self.tok.span, f"expected a predicate name, found {self.tok.text!r}")
        name = self.advance().text
        if name in BUILTIN_ARITY:
            raise DatalogSyntaxError(self.tok.span, f"builtin {name} cannot appear in a head")
        if not self.at("("):
            return Atom(name, ())
        self.advance()
        args: list = []
        agg = None
        while True:
            if self.tok.kind == "ident" and self.tok.text in AGGREGATE_KINDS and self.peek().text == "<":
                span = self.tok.span
                if agg is not None:
                    raise DatalogSyntaxError(span, "only one aggregate per head is allowed")
                kind = self.advance().text
                self.expect("<")
                if self.at("*"):
                    if kind != "count":
                        raise DatalogSyntaxError(self.tok.span, "only count accepts '*'")
                    self.advance()
                    var = None
                elif self.tok.kind == "var" and not _is_anonymous_name(self.tok.text):
                    var = self.advance().text
                else:
                    raise DatalogSyntaxError(self.tok.span, "aggregate argument must be a named variable")
                self.expect(">")
                agg = (kind, var, len(args))
            else:
                args.append(self.term())
            if self.at(","):
                self.advance()
                continue
            self.expect(")")
            break
        if agg is None:
            return Atom(name, tuple(args))
        kind, var, position = agg
        return AggregateHead(name, tuple(args), kind, var, position)

    def literal(self):
        t = self.tok
        if t.kind == "ident" and t.text == "not":
            self.advance()
            if self.tok.kind != "ident":
                raise DatalogSyntaxError(self.tok.span, "expected an atom after 'not'")
            return Negation(self.atom())
        if t.kind == "op" and t.text == "@complete":
            self.advance()
            self.expect("(")
            if self.tok.kind != "ident":
                raise DatalogSyntaxError(self.tok.span, "expected a predicate name")
            name = self.advance().text
            self.expect(")")
            return CountGuard(name)
        if t.kind == "ident" and self.peek().text == "(":
            if t.text in BUILTIN_ARITY:
                atom = self.atom()
                if atom.arity != BUILTIN_ARITY[t.text]:
                    raise DatalogSyntaxError(t.span, f"{t.text} takes {BUILTIN_ARITY[t.text]} arguments")
                return Builtin(t.text, atom.args)
            return self.atom()
        if t.kind == "ident" and self.peek().text in (",", ".") and self.peek().kind == "op":
            return self.atom()
        left = self.term()
        op = self.tok
        if op.kind == "op" and op.text in ("<", "<=", ">", ">=", "=", "!=", "<>"):
            self.advance()
            right = self.term()
            return Comparison("!=" if op.text == "<>" else op.text, left, right)
        raise DatalogSyntaxError(op.span, f"expected a comparison operator, found {op.text or 'end of input'!r}")

    def atom(self) -> Atom:
        name = self.advance().text
        if not self.at("("):
            return Atom(name, ())
        self.advance()
        args = [self.term()]
        while self.at(","):
            self.advance()
            args.append(self.term())
        self.expect(")")
        return Atom(name, tuple(args))

    # terms ----------------------------------------------------------

    def term(self):
        left = self.product()
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            op = self.advance().text
            left = Arith(op, left, self.product())
        return left

    def product(self):
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.advance().text
            left = Arith(op, left, self.unary())
        return left

    def unary(self):
        if self.at("-"):
            self.advance()
            inner = self.unary()
            if isinstance(inner, Const) and isinstance(inner.value, (int, float)) and not _is_negative(inner.value):
                return Const(-inner.value)
            return Arith("-", Const(0), inner)
        return self.primary()

    def primary(self):
        t = self.tok
        if t.kind == "number":
            self.advance()
            value = _parse_number(t.text)
            if isinstance(value, int) and value > INT_MAX + 1:
                raise DatalogSyntaxError(t.span, f"integer literal {t.text} out of range")
            return Const(value)
        if t.kind == "string":
            self.advance()
            return Const(symbol(_unescape(t.text)))
        if t.kind == "ident":
            if t.text in RESERVED_WORDS:
                raise DatalogSyntaxError(t.span, f"reserved word {t.text!r}")
            self.advance()
            return Const(symbol(t.text))
        if t.kind == "var":
            self.advance()
            if _is_anonymous_name(t.text):
                self.anon += 1
                return Var(f"_{self.anon}")
            return Var(t.text)
        if self.at("("):
            self.advance()
            inner = self.term()
            self.expect(")")
            return inner
        raise DatalogSyntaxError(t.span, f"expected a term, found {t.text or 'end of input'!r}")


def _is_anonymous_name(name: str) -> bool:
    return name == "_" or (name.startswith("_") and name[1:].isdigit())


def _is_negative(v) -> bool:
    return v < 0 or (isinstance(v, float) and str(v).startswith("-"))


# ---------------------------------------------------------------- safety


def bindable_vars(rule: Rule) -> set[str]:
    """Variables that the body can bind: positive atom arguments, plus
    equality and builtin outputs whose inputs are bound."""
    bound: set[str] = set()
    for lit in rule.body:
        if isinstance(lit, Atom):
            bound.update(a.name for a in lit.args if isinstance(a, Var))
    changed = True
    while changed:
        changed = False
        for lit in rule.body:
            if isinstance(lit, Comparison) and lit.op == "=":
                for target, source in ((lit.left, lit.right), (lit.right, lit.left)):
                    if (
                        isinstance(target, Var)
                        and target.name not in bound
                        and all(v.name in bound for v in term_vars(source))
                    ):
                        bound.add(target.name)
                        changed = True
            elif isinstance(lit, Builtin):
                if all(v.name in bound for t in lit.inputs for v in term_vars(t)):
                    for out in lit.outputs:
                        if isinstance(out, Var) and out.name not in bound:
                            bound.add(out.name)
                            changed = True
    return bound


def check_safety(rule: Rule) -> None:
    bound = bindable_vars(rule)
    for lit in rule.body:
        if isinstance(lit, Negation):
            for v in lit.vars():
                if not v.anonymous and v.name not in bound:
                    raise SafetyViolation(rule, v.name, "negated literal")
        elif isinstance(lit, Comparison):
            for v in lit.vars():
                if v.name not in bound:
                    raise SafetyViolation(rule, str(v), "comparison")
        elif isinstance(lit, Builtin):
            for t in lit.inputs:
                for v in term_vars(t):
                    if v.name not in bound:
                        raise SafetyViolation(rule, str(v), f"{lit.name} input")
            for t in lit.outputs:
                if not isinstance(t, Var):
                    for v in term_vars(t):
                        if v.name not in bound:
                            raise SafetyViolation(rule, str(v), f"{lit.name} output")
        elif isinstance(lit, Atom):
            for a in lit.args:
                if isinstance(a, Arith):
                    for v in term_vars(a):
                        if v.name not in bound:
                            raise SafetyViolation(rule, str(v), "arithmetic argument")
    head = rule.head
    for v in head.vars():
        if v.anonymous or v.name not in bound:
            raise SafetyViolation(rule, str(v), "head")
    if isinstance(head, AggregateHead) and head.agg_var is not None:
        if any(head.agg_var == v.name for a in head.group_args for v in term_vars(a)):
            raise SafetyViolation(rule, head.agg_var, "aggregated variable also used as a group key")


# ---------------------------------------------------------------- programs


def parse_program(text: str) -> Program:
    """Parse program text into a :class:`Program`, checking arities and safety."""
    parser = _Parser(text)
    clauses = parser.clauses()
    arities: dict[str, int] = {}
    rules: list[Rule] = []
    facts: dict[str, set[tuple]] = {}

    def note(pred: str, arity: int, span: SourceSpan) -> None:
        if pred in BUILTIN_ARITY:
            raise DatalogSyntaxError(span, f"{pred} is a builtin")
        known = arities.setdefault(pred, arity)
        if known != arity:
            raise DatalogSyntaxError(span, f"predicate {pred} used with arity {arity} and {known}")

    for rule, span in clauses:
        note(rule.head.predicate, rule.head.arity, span)
        for lit in rule.body:
            atom = lit.atom if isinstance(lit, Negation) else lit
            if isinstance(atom, Atom):
                note(atom.predicate, atom.arity, span)
        if not rule.body and isinstance(rule.head, Atom) and all(isinstance(a, Const) for a in rule.head.args):
            facts.setdefault(rule.head.predicate, set()).add(tuple(a.value for a in rule.head.args))
            continue
        check_safety(rule)
        rules.append(rule)

    heads = {r.head.predicate for r in rules}
    both = heads & set(facts)
    if both:
        pred = sorted(both)[0]
        raise DatalogSyntaxError(SourceSpan(1, 1, 0), f"predicate {pred} has both facts and rules")
    edb: dict[str, int] = {}
    for pred in list(facts):
        edb[pred] = arities[pred]
    for rule in rules:
        for lit in rule.body:
            atom = lit.atom if isinstance(lit, Negation) else lit
            if isinstance(atom, Atom) and atom.predicate not in heads:
                edb.setdefault(atom.predicate, atom.arity)
    return Program(rules=rules, edb_schemas=edb, facts=facts)


def pretty_print(program: Program) -> str:
    from .core_model import format_value, tuple_sort_key

    lines = []
    for pred in sorted(program.facts):
        for row in sorted(program.facts[pred], key=tuple_sort_key):
            args = ", ".join(format_value(v) for v in row)
            lines.append(f"{pred}({args})." if row else f"{pred}.")
    lines.extend(str(r) for r in program.rules)
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------- fact files

_INT_RE = re.compile(r"[+-]?\d+")
_FLOAT_RE = re.compile(r"[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")


def parse_value(text: str):
    """Integral literals become Int, literals with '.' or an exponent Float, anything else a Symbol."""
    s = text.strip()
    if not s:
        raise MalformedValue("empty field")
    if _INT_RE.fullmatch(s):
        n = int(s)
        if n < INT_MIN or n > INT_MAX:
            raise MalformedValue(f"integer out of range: {s}")
        return n
    if _FLOAT_RE.fullmatch(s):
        return float(s)
    return symbol(s)


def parse_fact_file(text: str, schema: dict[str, int]) -> FactSet:
    """Parse CSV facts (``predicate,value,...`` per line) into a FactSet.

    Blank lines and lines starting with ``%`` or ``#`` are skipped.
    """
    facts = FactSet()
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith(("%", "#")):
            continue
        pred = row[0].strip()
        if pred not in schema:
            raise UnknownPredicate(f"line {lineno}: unknown predicate {pred!r}")
        fields = row[1:]
        if len(fields) != schema[pred]:
            raise ArityMismatch(f"line {lineno}: {pred} expects {schema[pred]} fields, got {len(fields)}")
        try:
            facts.add(pred, tuple(parse_value(f) for f in fields))
        except MalformedValue as exc:
            raise MalformedValue(f"line {lineno}: {exc}") from None
    return facts


def parse_facts_tsv(text: str, predicate: str, arity: int) -> FactSet:
    """Parse one predicate's whitespace-separated ``.facts`` file."""
    facts = FactSet()
    facts._data.setdefault(predicate, set())
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith(("%", "#")):
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if len(fields) != arity:
            raise ArityMismatch(f"line {lineno}: {predicate} expects {arity} fields, got {len(fields)}")
        try:
            facts.add(predicate, tuple(parse_value(f) for f in fields))
        except MalformedValue as exc:
            raise MalformedValue(f"line {lineno}: {exc}") from None
    return facts
