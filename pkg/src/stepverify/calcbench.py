"""Marked-calculation extraction and a ground-truth calculation-error benchmark.

Steps may carry computations inside "<<...>>" markers, e.g. "<<10,000/20=500>>".
Each marked region is split at its last top-level '=' into an arithmetic
expression (lhs) and a claimed result (rhs). The lhs is evaluated exactly with
rational arithmetic; a region whose lhs value differs from its rhs beyond a
relative tolerance of 1e-6 is a calculation error. Regions that cannot be
evaluated (unknown symbols, missing '=', chained '=', division by zero) are
"unevaluable" and excluded from ground truth rather than guessed at.

Supported expression grammar (everything else is unevaluable):

    expr    := term   (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := ('-' | '+')* primary
    primary := NUMBER | '(' expr ')'

NUMBER allows digit-group commas and decimal points. '*' and '/' bind tighter
than '+' and '-'; operators of equal precedence associate left.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .corpus import SolutionSet
from .errors import DataError

VERDICT_CORRECT = "correct"
VERDICT_MISMATCH = "mismatch"
VERDICT_UNEVALUABLE = "unevaluable"

# Same relative tolerance as answer equality; compared exactly in rationals.
CALC_REL_TOL = Fraction(1, 10**6)

_SPAN_RE = re.compile(r"<<(.*?)>>", re.DOTALL)
_NUMBER_RE = re.compile(r"\d[\d,]*(?:\.\d*)?|\.\d+")
_RHS_RE = re.compile(r"^[+-]?(\d[\d,]*(\.\d*)?|\.\d+)$")


class CalcEvalError(ValueError):
    """Raised when an expression cannot be evaluated to a finite number."""


@dataclass(frozen=True)
class CalcSpan:
    step_index: int  # 1-based step the span was found in
    raw: str
    lhs: str | None
    rhs: str | None
    verdict: str


@dataclass(frozen=True)
class CalcGroundTruth:
    solution_id: str
    has_calc_error: tuple[bool, ...]  # one flag per step
    excluded: bool  # no evaluable span anywhere in the solution


@dataclass(frozen=True)
class DetectionReport:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    excluded_count: int

    def record(self) -> dict[str, object]:
        return {
            "theta": self.threshold,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "excluded_count": self.excluded_count,
        }


def _tokenize(expr: str) -> list[str]:
    tokens: list[str] = []
    i = 0
    n = len(expr)
    while i < n:
        ch = expr[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*/()":
            tokens.append(ch)
            i += 1
            continue
        match = _NUMBER_RE.match(expr, i)
        if match and match.start() == i:
            tokens.append(match.group(0))
            i = match.end()
            continue
        raise CalcEvalError(f"unknown symbol {ch!r} in expression")
    return tokens


def _parse_number(token: str) -> Fraction:
    cleaned = token.replace(",", "")
    try:
        return Fraction(cleaned)
    except (ValueError, ZeroDivisionError) as exc:
        raise CalcEvalError(f"bad number literal {token!r}") from exc


class _Parser:
    """Recursive-descent evaluator over the token list."""

    def __init__(self, tokens: list[str]) -> None:
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        token = self.peek()
        if token is None:
            raise CalcEvalError("unexpected end of expression")
        self.pos += 1
        return token

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self) -> Fraction:
        value = self.factor()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.factor()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise CalcEvalError("division by zero")
                value = value / rhs
        return value

    def factor(self) -> Fraction:
        sign = 1
        while self.peek() in ("+", "-"):
            if self.take() == "-":
                sign = -sign
        return sign * self.primary()

    def primary(self) -> Fraction:
        token = self.take()
        if token == "(":
            value = self.expr()
            if self.take() != ")":
                raise CalcEvalError("unbalanced parenthesis")
            return value
        if token in "+-*/()":
            raise CalcEvalError(f"unexpected token {token!r}")
        return _parse_number(token)


def eval_expr(expr: str) -> Fraction:
    """Evaluate an arithmetic expression exactly; raises CalcEvalError otherwise."""
    tokens = _tokenize(expr)
    if not tokens:
        raise CalcEvalError("empty expression")
    parser = _Parser(tokens)
    value = parser.expr()
    if parser.peek() is not None:
        raise CalcEvalError(f"trailing input at token {parser.peek()!r}")
    return value


def values_match(lhs: Fraction, rhs: Fraction) -> bool:
    return abs(lhs - rhs) <= CALC_REL_TOL * max(abs(lhs), abs(rhs))


def _span_verdict(inside: str) -> tuple[str | None, str | None, str]:
    eq = inside.rfind("=")
    if eq < 0:
        return None, None, VERDICT_UNEVALUABLE
    lhs = inside[:eq].strip()
    rhs = inside[eq + 1 :].strip()
    if "=" in lhs:  # chained a=b=c forms are ambiguous; never guess
        return lhs, rhs, VERDICT_UNEVALUABLE
    rhs_clean = rhs.replace(" ", "")
    if not _RHS_RE.match(rhs_clean):
        return lhs, rhs, VERDICT_UNEVALUABLE
    try:
        lhs_value = eval_expr(lhs)
    except CalcEvalError:
        return lhs, rhs, VERDICT_UNEVALUABLE
    rhs_value = _parse_number(rhs_clean)
    verdict = VERDICT_CORRECT if values_match(lhs_value, rhs_value) else VERDICT_MISMATCH
    return lhs, rhs, verdict


def extract_calc_spans(step: str, step_index: int = 1) -> list[CalcSpan]:
    """One CalcSpan per "<<...>>" region; text outside markers is ignored."""
    spans: list[CalcSpan] = []
    for match in _SPAN_RE.finditer(step):
        inside = match.group(1).strip()
        lhs, rhs, verdict = _span_verdict(inside)
        spans.append(CalcSpan(step_index=step_index, raw=match.group(0), lhs=lhs, rhs=rhs, verdict=verdict))
    return spans


def step_flags(steps: Sequence[str]) -> tuple[tuple[bool, ...], bool]:
    """Per-step error flags plus whether the solution has any evaluable span."""
    flags: list[bool] = []
    any_evaluable = False
    for index, step in enumerate(steps, start=1):
        spans = extract_calc_spans(step, index)
        evaluable = [s for s in spans if s.verdict != VERDICT_UNEVALUABLE]
        any_evaluable = any_evaluable or bool(evaluable)
        flags.append(any(s.verdict == VERDICT_MISMATCH for s in evaluable))
    return tuple(flags), any_evaluable


def ground_truth(sset: SolutionSet) -> dict[str, CalcGroundTruth]:
    truth: dict[str, CalcGroundTruth] = {}
    for sol in sset.solutions():
        flags, any_evaluable = step_flags(sol.steps)
        truth[sol.id] = CalcGroundTruth(
            solution_id=sol.id, has_calc_error=flags, excluded=not any_evaluable
        )
    return truth


def detection_metrics(
    truth_store: Mapping[str, CalcGroundTruth],
    delta_store: Mapping[str, Sequence[float]],
    threshold: float,
) -> DetectionReport:
    """Sample-level detection: a solution is predicted positive iff any of its
    confidence deltas is <= threshold; truth positive iff any step has a
    calculation error. Excluded solutions are dropped."""
    kept = sorted(sid for sid, gt in truth_store.items() if not gt.excluded)
    excluded_count = len(truth_store) - len(kept)
    if kept and not any(sid in delta_store for sid in kept):
        raise DataError("truth store and delta store have disjoint solution ids")
    missing = [sid for sid in kept if sid not in delta_store]
    if missing:
        raise DataError(f"delta store missing {len(missing)} solutions, e.g. {missing[:5]}")
    tp = fp = fn = tn = 0
    for sid in kept:
        truth_pos = any(truth_store[sid].has_calc_error)
        pred_pos = any(d <= threshold for d in delta_store[sid])
        if truth_pos and pred_pos:
            tp += 1
        elif truth_pos:
            fn += 1
        elif pred_pos:
            fp += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return DetectionReport(
        threshold=threshold, precision=precision, recall=recall, f1=f1,
        tp=tp, fp=fp, fn=fn, tn=tn, excluded_count=excluded_count,
    )


def detection_metrics_steps(
    truth_store: Mapping[str, CalcGroundTruth],
    delta_store: Mapping[str, Sequence[float]],
    threshold: float,
) -> DetectionReport:
    """Step-level variant (secondary report). Step t >= 2 of a non-excluded
    solution is predicted positive iff delta[t-2] <= threshold; step 1 has no
    incoming delta and is skipped."""
    kept = sorted(sid for sid, gt in truth_store.items() if not gt.excluded)
    excluded_count = len(truth_store) - len(kept)
    tp = fp = fn = tn = 0
    for sid in kept:
        if sid not in delta_store:
            raise DataError(f"delta store missing solution {sid!r}")
        flags = truth_store[sid].has_calc_error
        deltas = delta_store[sid]
        for t in range(2, len(flags) + 1):
            truth_pos = flags[t - 1]
            pred_pos = t - 2 < len(deltas) and deltas[t - 2] <= threshold
            if truth_pos and pred_pos:
                tp += 1
            elif truth_pos:
                fn += 1
            elif pred_pos:
                fp += 1
            else:
                tn += 1
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return DetectionReport(
        threshold=threshold, precision=precision, recall=recall, f1=f1,
        tp=tp, fp=fp, fn=fn, tn=tn, excluded_count=excluded_count,
    )


def sweep(
    truth_store: Mapping[str, CalcGroundTruth],
    delta_store: Mapping[str, Sequence[float]],
    thresholds: Iterable[float],
) -> list[DetectionReport]:
    return [detection_metrics(truth_store, delta_store, theta) for theta in thresholds]
