"""Completion-sampling step values and annotation-cost accounting.

The comparison labeling strategy estimates a step's value as the fraction of
N sampled completions from its prefix that reach the gold answer. It needs
gold answers (unlike confidence-change labeling) and costs roughly N full
completions per prefix, which the cost ledger quantifies.

There is no tree policy here: each prefix is evaluated independently by flat
completion sampling, seeded per (run, solution, prefix, sample) so results
are reproducible under any parallel schedule.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import synthworld
from .annotate import PROVENANCE_MCTS, ProcessLabels, Provenance, staircase_labels
from .corpus import CanonicalAnswer, Solution, SolutionSet, answers_equal, normalize_answer
from .errors import BackendError, DataError, UsageError
from .seeds import derive_seed

DEFAULT_SAMPLES_PER_STEP = 8

RULE_ANY_POSITIVE = "any-positive"
RULE_MAJORITY = "majority"


class CompletionSampler:
    """Produces final answers of n completions of a prefix."""

    def final_answers(
        self, question: str, prefix: Sequence[str], n: int, solution_id: str, prefix_len: int
    ) -> list[str]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SynthWorldSampler(CompletionSampler):
    """Completes world prefixes with per-step mistake probability p_mistake."""

    def __init__(self, p_mistake: float, run_seed: int = 0) -> None:
        self.p_mistake = p_mistake
        self.run_seed = run_seed

    def final_answers(
        self, question: str, prefix: Sequence[str], n: int, solution_id: str, prefix_len: int
    ) -> list[str]:
        answers = []
        for i in range(n):
            rng = np.random.default_rng(
                derive_seed(self.run_seed, "mc", solution_id, prefix_len, i)
            )
            _, final = synthworld.sample_completion(question, prefix, self.p_mistake, rng)
            answers.append(final)
        return answers


class ExecSampler(CompletionSampler):
    """External sampler process. Line protocol mirroring the scorer protocol:
    request {"rid", "question", "steps", "n"} -> response
    {"rid", "final_answers": [str, ...]} with exactly n answers."""

    def __init__(self, command: str) -> None:
        self.command = command
        self._proc: subprocess.Popen[str] | None = None

    def _ensure_proc(self) -> subprocess.Popen[str]:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    text=True,
                    encoding="utf-8",
                )
            except OSError as exc:
                raise BackendError(f"cannot start sampler {self.command!r}: {exc}") from exc
        return self._proc

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin and not self._proc.stdin.closed:
                self._proc.stdin.close()
            self._proc.wait(timeout=30)
            self._proc = None

    def final_answers(
        self, question: str, prefix: Sequence[str], n: int, solution_id: str, prefix_len: int
    ) -> list[str]:
        proc = self._ensure_proc()
        assert proc.stdin is not None and proc.stdout is not None
        rid = f"{solution_id}:{prefix_len}"
        request = {"rid": rid, "question": question, "steps": list(prefix), "n": n}
        proc.stdin.write(json.dumps(request, ensure_ascii=False) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if line == "":
            stderr = proc.stderr.read() if proc.stderr else ""
            self._proc = None
            raise BackendError(f"sampler process exited; stderr: {stderr.strip()[-500:]}")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"sampler protocol violation ({exc.msg}) in line: {line.rstrip()}") from exc
        answers = msg.get("final_answers") if isinstance(msg, dict) else None
        if msg.get("rid") != rid or not isinstance(answers, list) or len(answers) != n:
            raise BackendError(f"sampler protocol violation in line: {line.rstrip()}")
        return [str(a) for a in answers]


def mc_step_value(
    question: str,
    prefix: Sequence[str],
    gold: CanonicalAnswer,
    sampler: CompletionSampler,
    n: int = DEFAULT_SAMPLES_PER_STEP,
    *,
    solution_id: str = "",
    prefix_len: int | None = None,
) -> float:
    """Fraction of n sampled completions whose final answer matches gold."""
    if n < 1:
        raise UsageError("samples per step must be >= 1")
    if gold is None:
        raise DataError("completion-sampling labels require a gold answer")
    prefix_len = len(prefix) if prefix_len is None else prefix_len
    answers = sampler.final_answers(question, prefix, n, solution_id, prefix_len)
    correct = sum(1 for a in answers if answers_equal(normalize_answer(a), gold))
    return correct / n


def label_mcts(
    solution: Solution,
    gold: CanonicalAnswer,
    sampler: CompletionSampler,
    n: int = DEFAULT_SAMPLES_PER_STEP,
    hard_rule: str = RULE_ANY_POSITIVE,
) -> ProcessLabels:
    """Soft values per prefix plus hard first-error labels under the rule."""
    if hard_rule not in (RULE_ANY_POSITIVE, RULE_MAJORITY):
        raise UsageError(f"unknown hard-label rule: {hard_rule!r}")
    soft: list[float] = []
    for t in range(1, solution.num_steps + 1):
        soft.append(
            mc_step_value(
                solution.question,
                solution.steps[:t],
                gold,
                sampler,
                n,
                solution_id=solution.id,
                prefix_len=t,
            )
        )
    if hard_rule == RULE_ANY_POSITIVE:
        hard = [1 if v > 0.0 else 0 for v in soft]
    else:
        hard = [1 if v >= 0.5 else 0 for v in soft]
    first_error = next((t for t, y in enumerate(hard, start=1) if y == 0), None)
    # first-error propagation keeps both labeling strategies on the same
    # staircase invariant
    return staircase_labels(
        solution.id,
        solution.num_steps,
        first_error,
        soft,
        Provenance(PROVENANCE_MCTS, {"samples": n, "rule": hard_rule}),
    )


def label_set_mcts(
    sset: SolutionSet,
    sampler: CompletionSampler,
    n: int = DEFAULT_SAMPLES_PER_STEP,
    hard_rule: str = RULE_ANY_POSITIVE,
) -> dict[str, ProcessLabels]:
    labels: dict[str, ProcessLabels] = {}
    for sol in sset.solutions():
        if sol.gold_answer is None:
            raise DataError(f"solution {sol.id!r} has no gold answer; completion labeling needs one")
        gold = normalize_answer(sol.gold_answer)
        labels[sol.id] = label_mcts(sol, gold, sampler, n, hard_rule)
    return labels


def count_tokens(text: str, counter: str = "whitespace") -> int:
    """Deterministic token approximation: whitespace runs, or ceil(chars / 4)."""
    if counter == "whitespace":
        return len(text.split())
    if counter == "chars4":
        return (len(text) + 3) // 4
    raise UsageError(f"unknown token counter: {counter!r}")


@dataclass(frozen=True)
class CostLedger:
    """Token accounting for one corpus under both labeling strategies."""

    dataset: str
    questions: int
    avg_steps: float
    avg_tokens: float
    autopsv_tokens: int
    mcts_tokens: int
    samples_per_step: int
    counter: str
    per_solution: dict[str, tuple[int, int]] = field(default_factory=dict)

    def record(self) -> dict[str, object]:
        return {
            "dataset": self.dataset,
            "questions": self.questions,
            "avg_steps": self.avg_steps,
            "avg_tokens": self.avg_tokens,
            "autopsv_cost": self.autopsv_tokens,
            "mcts_cost": self.mcts_tokens,
        }


def cost_compare(
    sset: SolutionSet,
    samples_per_step: int = DEFAULT_SAMPLES_PER_STEP,
    counter: str = "whitespace",
    dataset: str = "synthetic",
) -> CostLedger:
    """Confidence-change labeling reads each solution once; completion
    sampling reads question+prefix and emits a completion N times per step.
    The solution's own remaining steps stand in for each sampled completion,
    so the ledger is deterministic and needs no sampler."""
    if samples_per_step < 1:
        raise UsageError("samples per step must be >= 1")
    per_solution: dict[str, tuple[int, int]] = {}
    total_steps = 0
    total_tokens = 0
    autopsv_total = 0
    mcts_total = 0
    count = 0
    for sol in sset.solutions():
        q_tokens = count_tokens(sol.question, counter)
        step_tokens = [count_tokens(step, counter) for step in sol.steps]
        sol_tokens = sum(step_tokens)
        autopsv = q_tokens + sol_tokens
        # for prefix t: input = question + steps 1..t, output = completion
        # (stand-in: steps t+1..m); together one full solution read per sample
        mcts = samples_per_step * sol.num_steps * (q_tokens + sol_tokens)
        per_solution[sol.id] = (autopsv, mcts)
        autopsv_total += autopsv
        mcts_total += mcts
        total_steps += sol.num_steps
        total_tokens += sol_tokens
        count += 1
    return CostLedger(
        dataset=dataset,
        questions=sset.num_questions,
        avg_steps=total_steps / count if count else 0.0,
        avg_tokens=total_tokens / count if count else 0.0,
        autopsv_tokens=autopsv_total,
        mcts_tokens=mcts_total,
        samples_per_step=samples_per_step,
        counter=counter,
        per_solution=per_solution,
    )


def agreement_with_truth(
    labels: Mapping[str, ProcessLabels],
    truth: Mapping[str, synthworld.SolutionTruth],
) -> float:
    """Fraction of steps whose hard label matches generator ground truth."""
    agree = 0
    total = 0
    for sid, entry in labels.items():
        gold = truth[sid].gold_labels
        if len(gold) != len(entry.labels):
            raise DataError(f"label length mismatch for {sid!r}")
        agree += sum(1 for a, b in zip(entry.labels, gold) if a == b)
        total += len(gold)
    if total == 0:
        raise DataError("no labels to compare")
    return agree / total
