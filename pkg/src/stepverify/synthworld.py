"""Deterministic synthetic reasoning world with closed-form correctness oracles.

Every question describes an integer chain: a start value and an ordered list
of operations (add / subtract / multiply). A solution walks the chain one
step per line, embedding each computation in a "<<expr = result>>" marker.
Corruption replaces one step's stated result with the true value plus a
positive offset; later steps compute correctly from the corrupted value, so
their markers verify but the running state (and the final answer) is wrong.
Because offsets are positive and the remaining operations (adding or
subtracting a constant, multiplying by a positive integer) map a positive gap
to a positive gap, a corrupted state can never rejoin the true chain; this
makes "corrupted implies wrong final answer" exact, which the step-value
oracle and the completion sampler rely on.

Error placement supports two models:

* "uniform": a solution is corrupted with probability p_error and the error
  step is drawn uniformly. Used for detection benchmarks.
* "stepwise": each step (given a still-clean prefix) goes wrong with
  probability p_mistake, i.e. generation follows the same law as the
  completion sampler. Under this model the conditional probability that a
  clean prefix with r remaining steps ends correct is exactly
  (1 - p_mistake)^r, which is what calibration experiments measure against.

In both models errors land on steps >= 2 whenever a solution has more than
one step: a wrong first step depresses the first confidence score itself but
produces no confidence *drop*, so adjacent-step labeling is structurally
blind to it. Keeping it out of generated corpora keeps label-equality
oracles exact; the limitation is documented where labels are produced.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import jsonl
from .corpus import Solution, SolutionSet
from .errors import DataError, UsageError
from .seeds import derive_seed

_PAD_WORDS = ("alpha", "beta", "gamma", "delta", "kappa", "sigma", "omega", "lambda")

_START_RE = re.compile(r"start with the number (-?\d+)", re.IGNORECASE)
_OPS_RE = re.compile(r"operations: (.*?)\. After the last operation")
_STEP_RESULT_RE = re.compile(r"=\s*(-?\d+)\s*>>")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    questions: int = 100
    solutions_per_question: int = 5
    steps_min: int = 3
    steps_max: int = 8
    value_min: int = 2
    value_max: int = 9
    p_error: float = 0.5
    p_mistake: float = 0.2
    error_model: str = "uniform"  # "uniform" | "stepwise"
    question_tokens: int = 0  # pad question text to at least this many tokens
    step_tokens: int = 0      # pad each step to at least this many tokens

    def __post_init__(self) -> None:
        if self.steps_min < 1 or self.steps_max < self.steps_min:
            raise UsageError("invalid steps range")
        if not (0.0 <= self.p_error <= 1.0 and 0.0 <= self.p_mistake <= 1.0):
            raise UsageError("probabilities must be in [0, 1]")
        if self.error_model not in ("uniform", "stepwise"):
            raise UsageError(f"unknown error model: {self.error_model!r}")
        if self.value_min < 2 or self.value_max < self.value_min:
            raise UsageError("invalid operand value range")


@dataclass(frozen=True)
class SolutionTruth:
    solution_id: str
    error_step: int | None  # 1-based; None when the solution is clean
    gold_labels: tuple[int, ...]


def _pad(text: str, target_tokens: int) -> str:
    have = len(text.split())
    if have >= target_tokens:
        return text
    filler = [_PAD_WORDS[i % len(_PAD_WORDS)] for i in range(target_tokens - have)]
    return text + " " + " ".join(filler)


def _op_phrase(kind: str, operand: int) -> str:
    if kind == "add":
        return f"add {operand}"
    if kind == "sub":
        return f"subtract {operand}"
    return f"multiply by {operand}"


def _apply(kind: str, value: int, operand: int) -> int:
    if kind == "add":
        return value + operand
    if kind == "sub":
        return value - operand
    return value * operand


def _expr(kind: str, value: int, operand: int) -> str:
    op = {"add": "+", "sub": "-", "mul": "*"}[kind]
    return f"{value}{op}{operand}"


def _question_text(start: int, ops: Sequence[tuple[str, int]], pad_to: int) -> str:
    # no question-id token in the text: ids live in the records, and id tokens
    # would alias across corpora generated from different seeds
    phrases = "; ".join(_op_phrase(kind, operand) for kind, operand in ops)
    text = (
        f"Start with the number {start}. Then apply, in order, "
        f"the following {len(ops)} operations: {phrases}. After the last "
        f"operation, report the final value."
    )
    return _pad(text, pad_to)


def _step_text(t: int, m: int, kind: str, value: int, operand: int, result: int, pad_to: int) -> str:
    return _pad(
        f"Step {t} of {m} (p{t}of{m}): {_op_phrase(kind, operand)}, "
        f"giving <<{_expr(kind, value, operand)} = {result}>>.",
        pad_to,
    )


def parse_question(question: str) -> tuple[int, list[tuple[str, int]]]:
    """Recover (start value, operation list) from world question text."""
    start_match = _START_RE.search(question)
    ops_match = _OPS_RE.search(question)
    if not start_match or not ops_match:
        raise DataError("question text is not in world format")
    ops: list[tuple[str, int]] = []
    for phrase in ops_match.group(1).split("; "):
        if phrase.startswith("add "):
            ops.append(("add", int(phrase[4:])))
        elif phrase.startswith("subtract "):
            ops.append(("sub", int(phrase[9:])))
        elif phrase.startswith("multiply by "):
            ops.append(("mul", int(phrase[12:])))
        else:
            raise DataError(f"unparseable operation phrase: {phrase!r}")
    return int(start_match.group(1)), ops


def stated_result(step: str) -> int:
    """The result claimed by a world step's calculation marker."""
    match = _STEP_RESULT_RE.search(step)
    if not match:
        raise DataError(f"step has no result marker: {step!r}")
    return int(match.group(1))


def _draw_error_step(rng: np.random.Generator, m: int, config: WorldConfig) -> int | None:
    # errors start at step 2 (see module docstring); single-step chains may
    # only err at step 1
    if config.error_model == "uniform":
        if rng.random() >= config.p_error:
            return None
        return 1 if m == 1 else int(rng.integers(2, m + 1))
    if m == 1:
        return 1 if rng.random() < config.p_mistake else None
    for t in range(2, m + 1):
        if rng.random() < config.p_mistake:
            return t
    return None


def _chain_values(start: int, ops: Sequence[tuple[str, int]]) -> list[int]:
    values = []
    value = start
    for kind, operand in ops:
        value = _apply(kind, value, operand)
        values.append(value)
    return values


def gen_corpus(config: WorldConfig) -> tuple[SolutionSet, dict[str, SolutionTruth]]:
    """Generate a labeled corpus plus its truth sidecar, byte-deterministic in the seed."""
    sset = SolutionSet(metadata={"source": "synthworld", "seed": str(config.seed)})
    truth: dict[str, SolutionTruth] = {}
    for qi in range(config.questions):
        qid = f"q{qi:05d}"
        qrng = np.random.default_rng(derive_seed(config.seed, "question", qi))
        m = int(qrng.integers(config.steps_min, config.steps_max + 1))
        start = int(qrng.integers(10, 100))
        ops: list[tuple[str, int]] = []
        muls = 0
        for _ in range(m):
            # at most two multiplications per chain keeps values small enough
            # that a unit offset always exceeds the relative match tolerance
            kind = str(qrng.choice(["add", "sub", "mul"]))
            if kind == "mul" and muls >= 2:
                kind = "add"
            if kind == "mul":
                muls += 1
                operand = int(qrng.integers(config.value_min, config.value_max + 1))
            else:
                operand = int(qrng.integers(10, 100))
            ops.append((kind, operand))
        question = _question_text(start, ops, config.question_tokens)
        gold = _chain_values(start, ops)[-1]
        group: list[Solution] = []
        for sj in range(config.solutions_per_question):
            sid = f"{qid}-s{sj:02d}"
            srng = np.random.default_rng(derive_seed(config.seed, "solution", qid, sj))
            error_step = _draw_error_step(srng, m, config)
            offset = int(srng.integers(1, 10)) if error_step is not None else 0
            steps: list[str] = []
            value = start
            for t, (kind, operand) in enumerate(ops, start=1):
                result = _apply(kind, value, operand)
                if t == error_step:
                    result += offset
                steps.append(_step_text(t, m, kind, value, operand, result, config.step_tokens))
                value = result
            group.append(
                Solution(
                    id=sid,
                    question_id=qid,
                    question=question,
                    steps=tuple(steps),
                    final_answer=str(value),
                    gold_answer=str(gold),
                )
            )
            labels = tuple(
                1 if (error_step is None or t < error_step) else 0 for t in range(1, m + 1)
            )
            truth[sid] = SolutionTruth(solution_id=sid, error_step=error_step, gold_labels=labels)
        sset.groups[qid] = group
    return sset, truth


def true_step_value(clean: bool, remaining_steps: int, p_mistake: float) -> float:
    """Probability that continuing from this prefix reaches the gold answer."""
    if remaining_steps < 0:
        raise UsageError("remaining steps must be >= 0")
    if not clean:
        return 0.0
    return (1.0 - p_mistake) ** remaining_steps


def prefix_is_clean(truth: SolutionTruth, t: int) -> bool:
    return truth.error_step is None or t < truth.error_step


def oracle_scores(truth: SolutionTruth, num_steps: int, p_mistake: float) -> list[float]:
    """Closed-form per-prefix values for one world solution."""
    return [
        true_step_value(prefix_is_clean(truth, t), num_steps - t, p_mistake)
        for t in range(1, num_steps + 1)
    ]


def sample_completion(
    question: str,
    prefix_steps: Sequence[str],
    p_mistake: float,
    rng: np.random.Generator,
) -> tuple[list[str], str]:
    """Complete a world prefix step by step; each new step is computed
    correctly with probability 1 - p_mistake, otherwise its stated result
    gains a positive offset. Returns (full step list, final answer)."""
    start, ops = parse_question(question)
    m = len(ops)
    done = len(prefix_steps)
    if done > m:
        raise DataError("prefix longer than the question's operation chain")
    value = stated_result(prefix_steps[-1]) if done else start
    steps = list(prefix_steps)
    for t in range(done + 1, m + 1):
        kind, operand = ops[t - 1]
        result = _apply(kind, value, operand)
        if rng.random() < p_mistake:
            result += int(rng.integers(1, 10))
        steps.append(_step_text(t, m, kind, value, operand, result, 0))
        value = result
    return steps, str(value)


def truth_records(truth: dict[str, SolutionTruth]) -> Iterator[dict[str, object]]:
    for sid in sorted(truth):
        entry = truth[sid]
        record: dict[str, object] = {
            "solution_id": entry.solution_id,
            "gold_labels": list(entry.gold_labels),
        }
        if entry.error_step is not None:
            record["error_step"] = entry.error_step
        yield record


def write_truth(path: str | Path, truth: dict[str, SolutionTruth]) -> None:
    jsonl.write_records(path, truth_records(truth))


def read_truth(path: str | Path) -> dict[str, SolutionTruth]:
    truth: dict[str, SolutionTruth] = {}
    for lineno, record in jsonl.read_records(path):
        try:
            sid = str(record["solution_id"])
            labels = tuple(int(x) for x in record["gold_labels"])
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
        error_step = record.get("error_step")
        truth[sid] = SolutionTruth(
            solution_id=sid,
            error_step=None if error_step is None else int(error_step),
            gold_labels=labels,
        )
    return truth
