"""Restricted interpreter for generated code answers and evaluation metrics.

The interpreter accepts a deliberately tiny line grammar (assignments over
+ - * / ** and a single ">" comparison, plus "#" comment lines) so model
output is never executed by a general-purpose runtime.  Metrics cover
execution accuracy, program accuracy, exact match, numeracy-focused F1,
attribute-subset breakdowns, and token-budget coverage.
"""

from __future__ import annotations

import math
import random
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

AnswerValue = Union[float, int, str, List[str]]

NUMERIC_TOLERANCE = 5e-3  # two-decimal rounding equivalence
PROBE_RELATIVE_TOLERANCE = 1e-9
PROBE_ROUNDS = 8
_PROBE_SEED = 0x5EED


class EvalSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ExecutionError(RuntimeError):
    """Arithmetic fault during program execution (recorded, not fatal)."""


# --- expression trees --------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ** >
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Var, Neg, BinOp]


@dataclass(frozen=True)
class Assignment:
    name: str
    expr: Expr


@dataclass(frozen=True)
class Comment:
    text: str


Statement = Union[Assignment, Comment]


@dataclass(frozen=True)
class MiniProgram:
    statements: Tuple[Statement, ...]

    @property
    def assignments(self) -> List[Assignment]:
        return [s for s in self.statements if isinstance(s, Assignment)]

    @property
    def comments(self) -> List[Comment]:
        return [s for s in self.statements if isinstance(s, Comment)]


# --- parsing -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>\*\*|[()+\-*/>]))"
)


def _tokenize(text: str, line: int) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if not match or match.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            column = pos + (len(text[pos:]) - len(stripped)) + 1
            raise EvalSyntaxError(f"unexpected character {stripped[0]!r}", line, column)
        if match.group("number") is not None:
            tokens.append(("number", match.group(0).strip(), match.start() + 1))
        elif match.group("name") is not None:
            tokens.append(("name", match.group("name"), match.start() + 1))
        else:
            tokens.append(("op", match.group("op"), match.start() + 1))
        pos = match.end()
    return tokens


class _ExprParser:
    def __init__(self, tokens: List[Tuple[str, str, int]], line: int):
        self.tokens = tokens
        self.line = line
        self.pos = 0

    def peek(self) -> Optional[Tuple[str, str, int]]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> Tuple[str, str, int]:
        tok = self.peek()
        if tok is None:
            raise EvalSyntaxError("unexpected end of expression", self.line, 0)
        self.pos += 1
        return tok

    def expect_op(self, op: str) -> None:
        tok = self.next()
        if tok[0] != "op" or tok[1] != op:
            raise EvalSyntaxError(f"expected {op!r}, found {tok[1]!r}", self.line, tok[2])

    def parse(self) -> Expr:
        expr = self.comparison()
        tok = self.peek()
        if tok is not None:
            raise EvalSyntaxError(f"trailing input {tok[1]!r}", self.line, tok[2])
        return expr

    def comparison(self) -> Expr:
        left = self.addsub()
        tok = self.peek()
        if tok is not None and tok[:2] == ("op", ">"):
            self.next()
            right = self.addsub()
            return BinOp(">", left, right)
        return left

    def addsub(self) -> Expr:
        expr = self.muldiv()
        while True:
            tok = self.peek()
            if tok is not None and tok[0] == "op" and tok[1] in "+-":
                self.next()
                expr = BinOp(tok[1], expr, self.muldiv())
            else:
                return expr

    def muldiv(self) -> Expr:
        expr = self.power()
        while True:
            tok = self.peek()
            if tok is not None and tok[0] == "op" and tok[1] in "*/":
                self.next()
                expr = BinOp(tok[1], expr, self.power())
            else:
                return expr

    def power(self) -> Expr:
        base = self.unary()
        tok = self.peek()
        if tok is not None and tok[:2] == ("op", "**"):
            self.next()
            return BinOp("**", base, self.power())
        return base

    def unary(self) -> Expr:
        tok = self.peek()
        if tok is not None and tok[:2] == ("op", "-"):
            self.next()
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Expr:
        tok = self.next()
        kind, text, column = tok
        if kind == "number":
            return Num(float(text))
        if kind == "name":
            return Var(text)
        if kind == "op" and text == "(":
            inner = self.comparison()
            self.expect_op(")")
            return inner
        raise EvalSyntaxError(f"unexpected token {text!r}", self.line, column)


_ASSIGN_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*=\s*(.+)$")


def parse_program(text: str) -> MiniProgram:
    """Line-oriented parse: "#"-lines are comments, "name = expr" lines are
    assignments, blank lines are skipped.  Identifiers must be assigned
    before use."""
    statements: List[Statement] = []
    assigned: set = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            statements.append(Comment(line[1:].strip()))
            continue
        match = _ASSIGN_RE.match(line)
        if not match:
            raise EvalSyntaxError("expected a comment or an assignment", lineno, 1)
        name, expr_text = match.group(1), match.group(2)
        expr = _ExprParser(_tokenize(expr_text, lineno), lineno).parse()
        for used in _variables(expr):
            if used not in assigned:
                raise EvalSyntaxError(f"variable {used!r} used before assignment", lineno, 1)
        assigned.add(name)
        statements.append(Assignment(name, expr))
    if not statements:
        raise EvalSyntaxError("empty program", 1, 1)
    return MiniProgram(tuple(statements))


def _variables(expr: Expr):
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            yield node.name
        elif isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.append(node.left)
            stack.append(node.right)


# --- execution ---------------------------------------------------------------


def _eval_expr(expr: Expr, env: Dict[str, Union[float, str]]) -> Union[float, str]:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        return env[expr.name]
    if isinstance(expr, Neg):
        value = _eval_expr(expr.operand, env)
        if isinstance(value, str):
            raise ExecutionError("cannot negate a comparison result")
        return -value
    left = _eval_expr(expr.left, env)
    right = _eval_expr(expr.right, env)
    if expr.op == ">":
        if isinstance(left, str) or isinstance(right, str):
            raise ExecutionError("cannot compare comparison results")
        return "yes" if left > right else "no"
    if isinstance(left, str) or isinstance(right, str):
        raise ExecutionError("comparison result used in arithmetic")
    try:
        if expr.op == "+":
            result = left + right
        elif expr.op == "-":
            result = left - right
        elif expr.op == "*":
            result = left * right
        elif expr.op == "/":
            result = left / right
        elif expr.op == "**":
            result = left ** right
        else:  # pragma: no cover - parser admits no other operator
            raise ExecutionError(f"unknown operator {expr.op!r}")
    except ZeroDivisionError:
        raise ExecutionError("division by zero") from None
    except OverflowError:
        raise ExecutionError("overflow") from None
    if isinstance(result, complex):
        raise ExecutionError("complex result")
    if not math.isfinite(result):
        raise ExecutionError("non-finite result")
    return result


def execute_program(program: MiniProgram) -> AnswerValue:
    """Evaluate assignments in order; the answer is the value of the last
    assigned variable.  Comment-only programs yield one span per comment
    line.  Arithmetic faults raise ExecutionError."""
    env: Dict[str, Union[float, str]] = {}
    answer: Optional[Union[float, str]] = None
    for stmt in program.statements:
        if isinstance(stmt, Assignment):
            answer = _eval_expr(stmt.expr, env)
            env[stmt.name] = answer
    if answer is not None:
        return answer
    return [c.text for c in program.comments]


# --- answer matching ---------------------------------------------------------

_STRIP_WORDS_RE = re.compile(r"\b(million|billion)\b", re.IGNORECASE)
_TRAILING_ZEROS_RE = re.compile(r"^(-?\d+)\.(\d*?)0+$")


def clean_answer_text(value: Union[float, int, str]) -> str:
    """Appendix-style cleanup: strip currency/percent/scale words and
    commas, lowercase, collapse whitespace, drop trailing decimal zeros."""
    if isinstance(value, bool):
        value = str(value).lower()
    if isinstance(value, (int, float)):
        text = _format_float(float(value))
    else:
        text = str(value)
    text = _STRIP_WORDS_RE.sub(" ", text)
    text = text.replace("$", " ").replace("%", " ").replace(",", " ")
    text = " ".join(text.lower().split())
    match = _TRAILING_ZEROS_RE.match(text)
    if match:
        text = match.group(1) + ("." + match.group(2) if match.group(2) else "")
    return text


def _format_float(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _parse_numeric(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def _numbers_close(a: float, b: float) -> bool:
    return abs(a - b) <= NUMERIC_TOLERANCE + 1e-12


def _single_match(pred, gold, allow_scale: bool) -> bool:
    pred_text = clean_answer_text(pred)
    gold_text = clean_answer_text(gold)
    pred_num = _parse_numeric(pred_text)
    gold_num = _parse_numeric(gold_text)
    if pred_num is not None and gold_num is not None:
        if _numbers_close(pred_num, gold_num):
            return True
        if allow_scale and (
            _numbers_close(pred_num, gold_num * 100.0)
            or _numbers_close(pred_num, gold_num / 100.0)
        ):
            return True
        return False
    return pred_text == gold_text


def _spans_of(value: AnswerValue) -> List[Union[float, int, str]]:
    if isinstance(value, list):
        return list(value)
    return [value]


def _perfect_matching(preds: list, golds: list, match) -> bool:
    if len(preds) != len(golds):
        return False

    taken = [False] * len(golds)

    def assign(i: int) -> bool:
        if i == len(preds):
            return True
        for j in range(len(golds)):
            if not taken[j] and match(preds[i], golds[j]):
                taken[j] = True
                if assign(i + 1):
                    return True
                taken[j] = False
        return False

    return assign(0)


def answers_match(pred: AnswerValue, gold: AnswerValue) -> bool:
    """Tolerant answer equivalence: cleanup, 2-decimal numeric tolerance,
    percentage/decimal scale equivalence, order-insensitive span lists."""
    if isinstance(pred, list) or isinstance(gold, list):
        return _perfect_matching(
            _spans_of(pred), _spans_of(gold), lambda a, b: _single_match(a, b, True)
        )
    return _single_match(pred, gold, True)


def exact_match(pred: AnswerValue, gold: AnswerValue) -> bool:
    """Strict match on cleaned forms: no percentage/decimal scaling, but the
    trailing-zero and 2-decimal rounding rules still apply."""
    if isinstance(pred, list) or isinstance(gold, list):
        return _perfect_matching(
            _spans_of(pred), _spans_of(gold), lambda a, b: _single_match(a, b, False)
        )
    return _single_match(pred, gold, False)


# --- numeracy-focused F1 -----------------------------------------------------

_PUNCT = set(string.punctuation)


def _bag_tokens(span: Union[float, int, str]) -> Counter:
    if isinstance(span, (int, float)):
        span = _format_float(float(span))
    tokens = []
    for raw in str(span).lower().split():
        token = raw.strip(string.punctuation)
        if not token:
            continue
        number = _parse_numeric(token)
        if number is not None:
            token = _format_float(number)
        tokens.append(token)
    return Counter(tokens)


def _bag_f1(pred: Counter, gold: Counter) -> float:
    if not pred or not gold:
        return 1.0 if pred == gold else 0.0
    common = sum((pred & gold).values())
    if common == 0:
        return 0.0
    precision = common / sum(pred.values())
    recall = common / sum(gold.values())
    return 2 * precision * recall / (precision + recall)


def numeracy_f1(pred: Sequence[Union[float, int, str]], gold: Sequence[Union[float, int, str]]) -> float:
    """Bag-of-words F1 per span, with multi-span lists aligned one-to-one by
    an optimal assignment and averaged over max(|pred|, |gold|)."""
    preds = [_bag_tokens(s) for s in _spans_of(list(pred) if isinstance(pred, (list, tuple)) else pred)]
    golds = [_bag_tokens(s) for s in _spans_of(list(gold) if isinstance(gold, (list, tuple)) else gold)]
    if not preds or not golds:
        return 1.0 if preds == golds else 0.0
    scores = np.zeros((len(preds), len(golds)))
    for i, p in enumerate(preds):
        for j, g in enumerate(golds):
            scores[i, j] = _bag_f1(p, g)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return float(scores[rows, cols].sum()) / max(len(preds), len(golds))


# --- program accuracy --------------------------------------------------------

_MAX_INLINE_NODES = 10_000


def _inline_answer_expr(program: MiniProgram) -> Optional[Expr]:
    assignments = program.assignments
    if not assignments:
        return None
    env: Dict[str, Expr] = {}
    budget = [_MAX_INLINE_NODES]

    def substitute(expr: Expr) -> Expr:
        budget[0] -= 1
        if budget[0] < 0:
            raise OverflowError("expression expansion too large")
        if isinstance(expr, Var):
            return env[expr.name]
        if isinstance(expr, Neg):
            return Neg(substitute(expr.operand))
        if isinstance(expr, BinOp):
            return BinOp(expr.op, substitute(expr.left), substitute(expr.right))
        return expr

    for stmt in assignments:
        env[stmt.name] = substitute(stmt.expr)
    return env[assignments[-1].name]


def _fold_constants(expr: Expr) -> Expr:
    if isinstance(expr, (Num, Var)):
        return expr
    if isinstance(expr, Neg):
        inner = _fold_constants(expr.operand)
        if isinstance(inner, Num):
            return Num(-inner.value)
        return Neg(inner)
    left = _fold_constants(expr.left)
    right = _fold_constants(expr.right)
    folded = BinOp(expr.op, left, right)
    if isinstance(left, Num) and isinstance(right, Num) and expr.op != ">":
        try:
            value = _eval_expr(folded, {})
        except ExecutionError:
            return folded
        if isinstance(value, float):
            return Num(value)
    return folded


def _flatten(expr: Expr, op: str) -> List[Expr]:
    if isinstance(expr, BinOp) and expr.op == op:
        return _flatten(expr.left, op) + _flatten(expr.right, op)
    return [expr]


def _render(expr: Expr) -> str:
    if isinstance(expr, Num):
        return _format_float(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(- {_render(expr.operand)})"
    if expr.op in "+*":
        parts = sorted(_render(e) for e in _flatten(expr, expr.op))
        return "(" + f" {expr.op} ".join(parts) + ")"
    return f"({_render(expr.left)} {expr.op} {_render(expr.right)})"


def canonical_form(program: MiniProgram) -> Tuple[Tuple[str, ...], Optional[str]]:
    """Comments plus the fully inlined, constant-folded, commutatively
    sorted rendering of the answer expression."""
    comments = tuple(c.text for c in program.comments)
    try:
        expr = _inline_answer_expr(program)
    except OverflowError:
        return comments, None
    if expr is None:
        return comments, None
    return comments, _render(_fold_constants(expr))


def _leaf_values(expr: Expr) -> set:
    values = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Num):
            values.add(node.value)
        elif isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.append(node.left)
            stack.append(node.right)
    return values


def _probe_equal(pred_expr: Expr, gold_expr: Expr) -> bool:
    shared = _leaf_values(pred_expr) & _leaf_values(gold_expr)
    rng = random.Random(_PROBE_SEED)
    for _ in range(PROBE_ROUNDS):
        draws = {value: rng.uniform(0.5, 2.5) for value in sorted(shared)}
        try:
            a = _eval_substituted(pred_expr, draws)
            b = _eval_substituted(gold_expr, draws)
        except ExecutionError:
            return False
        if isinstance(a, str) or isinstance(b, str):
            if a != b:
                return False
        elif abs(a - b) > PROBE_RELATIVE_TOLERANCE * max(1.0, abs(a), abs(b)):
            return False
    return True


def _eval_substituted(expr: Expr, draws: Dict[float, float]) -> Union[float, str]:
    if isinstance(expr, Num):
        return draws.get(expr.value, expr.value)
    if isinstance(expr, Neg):
        value = _eval_substituted(expr.operand, draws)
        if isinstance(value, str):
            raise ExecutionError("cannot negate a comparison result")
        return -value
    if isinstance(expr, BinOp):
        left = _eval_substituted(expr.left, draws)
        right = _eval_substituted(expr.right, draws)
        if isinstance(left, str) or isinstance(right, str):
            raise ExecutionError("comparison result used in arithmetic")
        return _eval_expr(BinOp(expr.op, Num(left), Num(right)), {})
    raise ExecutionError("unexpected variable")  # pragma: no cover


def program_accuracy(pred: Union[MiniProgram, str], gold: Union[MiniProgram, str]) -> bool:
    """True when the prediction is mathematically equivalent to the gold
    derivation: equal canonical forms, or agreement on seeded numeric
    probes of the shared literals."""
    try:
        pred_program = parse_program(pred) if isinstance(pred, str) else pred
    except EvalSyntaxError:
        return False
    gold_program = parse_program(gold) if isinstance(gold, str) else gold
    if not gold_program.assignments or not pred_program.assignments:
        # Comment-only programs carry textual answers; equivalence is
        # comment identity.
        if gold_program.assignments or pred_program.assignments:
            return False
        return canonical_form(pred_program)[0] == canonical_form(gold_program)[0]
    pred_canonical = canonical_form(pred_program)[1]
    gold_canonical = canonical_form(gold_program)[1]
    if pred_canonical is not None and pred_canonical == gold_canonical:
        return True
    try:
        pred_expr = _inline_answer_expr(pred_program)
        gold_expr = _inline_answer_expr(gold_program)
    except OverflowError:
        return False
    if pred_expr is None or gold_expr is None:
        return False
    return _probe_equal(pred_expr, gold_expr)


# --- reports -----------------------------------------------------------------


@dataclass
class InstanceMetrics:
    id: str
    ea: bool
    pa: bool
    em: bool
    f1: float


@dataclass
class MetricsReport:
    per_instance: List[InstanceMetrics]
    aggregates: Dict[str, float]
    coverage: float
    subsets: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_instance": [
                {"id": m.id, "ea": m.ea, "pa": m.pa, "em": m.em, "f1": m.f1}
                for m in self.per_instance
            ],
            "aggregates": self.aggregates,
            "coverage": self.coverage,
            "subsets": self.subsets,
        }


def aggregate_metrics(per_instance: Sequence[InstanceMetrics]) -> Dict[str, float]:
    n = len(per_instance)
    if n == 0:
        return {"ea": 0.0, "pa": 0.0, "em": 0.0, "f1": 0.0, "count": 0}
    return {
        "ea": sum(m.ea for m in per_instance) / n,
        "pa": sum(m.pa for m in per_instance) / n,
        "em": sum(m.em for m in per_instance) / n,
        "f1": sum(m.f1 for m in per_instance) / n,
        "count": n,
    }


def _attrs_equal(candidate: Dict[str, str], gold: Dict[str, str]) -> bool:
    return all(candidate.get(kind) == value for kind, value in gold.items())


def subset_report(
    per_instance: Sequence[InstanceMetrics],
    predicted_attrs: Dict[str, Dict[str, str]],
    gold_attrs: Dict[str, Dict[str, str]],
    selected_exemplar_attrs: Dict[str, List[Dict[str, str]]],
) -> Dict[str, Dict[str, float]]:
    """Split instances into CAP/IAP (attribute predicted correctly or not)
    and CAS/IAS (some selected exemplar carries the gold attributes or
    none does), with metric aggregates per subset."""
    members = {"CAP": [], "IAP": [], "CAS": [], "IAS": []}
    for row in per_instance:
        if row.id not in gold_attrs or row.id not in predicted_attrs or row.id not in selected_exemplar_attrs:
            raise KeyError(f"attribute maps missing instance {row.id!r}")
        gold = gold_attrs[row.id]
        correct_predicted = _attrs_equal(predicted_attrs[row.id], gold)
        correct_selected = any(
            _attrs_equal(ex, gold) for ex in selected_exemplar_attrs[row.id]
        )
        members["CAP" if correct_predicted else "IAP"].append(row)
        members["CAS" if correct_selected else "IAS"].append(row)
    return {name: aggregate_metrics(rows) for name, rows in members.items()}


def coverage_report(results: Sequence, budget: int) -> float:
    """Fraction of selection results whose prompt fits the token budget."""
    counts = []
    for item in results:
        if isinstance(item, (int, float)):
            counts.append(item)
        elif isinstance(item, dict):
            counts.append(item["prompt_tokens"])
        else:
            counts.append(item.prompt_tokens)
    if not counts:
        return 1.0
    return sum(1 for c in counts if c <= budget) / len(counts)
