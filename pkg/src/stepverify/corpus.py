"""Solution corpora: parsing, answer normalization, and outcome labeling.

A solutions file is line-delimited JSON, one object per line with fields
{id, question_id, question, steps, final_answer, gold_answer?}. Records are
grouped by question_id into a SolutionSet.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from . import jsonl
from .errors import DataError, UsageError

# Relative tolerance for numeric answer equality. Robust to formatting noise
# while far below any plausible gap between distinct answers.
NUMERIC_REL_TOL = 1e-6

_DECIMAL_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
_STRIP_RE = re.compile(r"[,\s$€£¥]")
_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class CanonicalAnswer:
    """Normalized form of a final answer: numeric when it parses as a decimal."""

    kind: str  # "numeric" | "symbolic"
    numeric_value: float | None = None
    normalized_text: str | None = None

    def key(self) -> tuple[str, str]:
        """Exact bucketing key (used by self-consistency voting)."""
        if self.kind == "numeric":
            return ("numeric", repr(self.numeric_value))
        return ("symbolic", self.normalized_text or "")


@dataclass(frozen=True)
class Solution:
    id: str
    question_id: str
    question: str
    steps: tuple[str, ...]
    final_answer: str
    gold_answer: str | None = None
    outcome_label: int | None = None

    def __post_init__(self) -> None:
        if not self.steps:
            raise DataError(f"solution {self.id!r}: empty steps")
        if any(not step.strip() for step in self.steps):
            raise DataError(f"solution {self.id!r}: blank step")
        if self.outcome_label is not None and self.gold_answer is None:
            raise DataError(f"solution {self.id!r}: outcome_label without gold_answer")

    @property
    def num_steps(self) -> int:
        return len(self.steps)


@dataclass
class SolutionSet:
    """Solutions grouped by question id; immutable once parsed."""

    groups: dict[str, list[Solution]] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def solutions(self) -> Iterator[Solution]:
        for qid in sorted(self.groups):
            yield from self.groups[qid]

    def by_id(self) -> dict[str, Solution]:
        return {sol.id: sol for sol in self.solutions()}

    def __len__(self) -> int:
        return sum(len(group) for group in self.groups.values())

    @property
    def num_questions(self) -> int:
        return len(self.groups)


def normalize_answer(raw: str) -> CanonicalAnswer:
    """Total normalization: numeric if the stripped text parses as a decimal,
    otherwise case-folded, whitespace-collapsed symbolic text."""
    stripped = _STRIP_RE.sub("", raw)
    if stripped and _DECIMAL_RE.match(stripped):
        return CanonicalAnswer(kind="numeric", numeric_value=float(stripped))
    collapsed = _WS_RE.sub(" ", raw.strip()).casefold()
    return CanonicalAnswer(kind="symbolic", normalized_text=collapsed)


def answers_equal(a: CanonicalAnswer, b: CanonicalAnswer) -> bool:
    """Equality under numeric relative tolerance; mixed kinds never match.

    Known limitation: fraction-aware normalization is not implemented, so
    "1/2" (symbolic) and "0.5" (numeric) compare unequal.
    """
    if a.kind != b.kind:
        return False
    if a.kind == "numeric":
        assert a.numeric_value is not None and b.numeric_value is not None
        x, y = a.numeric_value, b.numeric_value
        return abs(x - y) <= NUMERIC_REL_TOL * max(abs(x), abs(y))
    return a.normalized_text == b.normalized_text


def outcome_label(solution: Solution) -> int:
    """1 iff the solution's final answer matches its gold answer."""
    if solution.gold_answer is None:
        raise DataError("unlabeled corpus; outcome labeling unavailable")
    final = normalize_answer(solution.final_answer)
    gold = normalize_answer(solution.gold_answer)
    return 1 if answers_equal(final, gold) else 0


def label_set(sset: SolutionSet) -> dict[str, int]:
    """Outcome labels for every solution in the set (requires gold answers)."""
    return {sol.id: outcome_label(sol) for sol in sset.solutions()}


def split_steps(solution_text: str, mode: str = "newline") -> list[str]:
    """Segment free text into steps; whitespace-only segments are dropped."""
    if not solution_text:
        raise DataError("empty solution text")
    if mode == "newline":
        pieces = solution_text.split("\n")
    elif mode == "blank-line":
        pieces = re.split(r"\n\s*\n", solution_text)
    else:
        raise UsageError(f"unknown step-split mode: {mode!r}")
    steps = [piece for piece in pieces if piece.strip()]
    if not steps:
        raise DataError("solution text yields zero steps")
    return steps


def _solution_from_record(record: dict[str, Any], where: str) -> Solution:
    required = ("id", "question_id", "question", "steps", "final_answer")
    for name in required:
        if name not in record:
            raise DataError(f"{where}: missing field {name!r}")
    steps = record["steps"]
    if not isinstance(steps, list) or not all(isinstance(s, str) for s in steps):
        raise DataError(f"{where}: steps must be a list of strings")
    if not steps:
        raise DataError(f"{where}: empty steps")
    try:
        return Solution(
            id=str(record["id"]),
            question_id=str(record["question_id"]),
            question=str(record["question"]),
            steps=tuple(steps),
            final_answer=str(record["final_answer"]),
            gold_answer=None if record.get("gold_answer") is None else str(record["gold_answer"]),
        )
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from exc


def parse_records(records: Iterable[tuple[int, dict[str, Any]]], source: str = "<stream>") -> SolutionSet:
    sset = SolutionSet(metadata={"source": source})
    seen: set[str] = set()
    for lineno, record in records:
        where = f"{source}:{lineno}"
        sol = _solution_from_record(record, where)
        if sol.id in seen:
            raise DataError(f"{where}: duplicate solution id {sol.id!r}")
        seen.add(sol.id)
        group = sset.groups.setdefault(sol.question_id, [])
        if group and group[0].question != sol.question:
            raise DataError(
                f"{where}: question text differs from earlier records for question_id {sol.question_id!r}"
            )
        group.append(sol)
    return sset


def parse_corpus(path: str | Path) -> SolutionSet:
    """Parse a solutions file; the first malformed record aborts with its line number."""
    return parse_records(jsonl.read_records(path), source=str(path))


def solution_record(sol: Solution) -> dict[str, Any]:
    record: dict[str, Any] = {
        "id": sol.id,
        "question_id": sol.question_id,
        "question": sol.question,
        "steps": list(sol.steps),
        "final_answer": sol.final_answer,
    }
    if sol.gold_answer is not None:
        record["gold_answer"] = sol.gold_answer
    return record


def write_corpus(path: str | Path, sset: SolutionSet) -> None:
    jsonl.write_records(path, (solution_record(sol) for sol in sset.solutions()))


def read_outcome_store(path: str | Path) -> dict[str, int]:
    store: dict[str, int] = {}
    for lineno, record in jsonl.read_records(path):
        try:
            store[str(record["solution_id"])] = int(record["outcome_label"])
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
    return store


def write_outcome_store(path: str | Path, labels: dict[str, int]) -> None:
    jsonl.write_records(
        path,
        ({"solution_id": sid, "outcome_label": labels[sid]} for sid in sorted(labels)),
    )
