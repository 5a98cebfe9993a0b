"""Uniform scorer abstraction producing per-prefix confidence traces.

Backends: the builtin verifier model, a replay file, the synthetic-world
oracle (optionally with multiplicative noise), or an external process speaking
the wire protocol below over stdin/stdout (UTF-8, one JSON message per line):

    request:  {"rid": str, "question": str, "steps": [str, ...]}
    response: {"rid": str, "scores": [float, ...]}   # len(scores) == len(steps)

Responses may arrive out of order; rid correlates them. Any non-conforming
line aborts the run. Raw backend outputs are clamped into
[EPSILON, 1 - EPSILON] — the only mutation ever applied to scores — because
downstream confidence deltas divide by them.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import jsonl, synthworld
from .corpus import Solution, SolutionSet
from .errors import BackendError, DataError, UsageError
from .seeds import derive_seed
from .verifier import VerifierModel, predict_solution

EPSILON = 1e-6


@dataclass(frozen=True)
class ConfidenceTrace:
    solution_id: str
    scores: tuple[float, ...]
    backend: str
    clamp_count: int = 0

    def __post_init__(self) -> None:
        if not self.scores:
            raise DataError(f"trace {self.solution_id!r}: empty score list")
        for s in self.scores:
            if not (EPSILON <= s <= 1.0 - EPSILON):
                raise DataError(f"trace {self.solution_id!r}: score {s!r} outside clamp range")

    def __len__(self) -> int:
        return len(self.scores)


def clamp_scores(raw: Sequence[float]) -> tuple[tuple[float, ...], int]:
    clamped = []
    count = 0
    for s in raw:
        c = min(max(float(s), EPSILON), 1.0 - EPSILON)
        if c != s:
            count += 1
        clamped.append(c)
    return tuple(clamped), count


@dataclass(frozen=True)
class ScorerSpec:
    """Exactly one backend kind: builtin | replay | oracle | exec."""

    kind: str
    model_path: str | None = None
    trace_path: str | None = None
    truth_path: str | None = None
    p_mistake: float = 0.2
    noise_sigma: float = 0.0
    noise_seed: int = 0
    command: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("builtin", "replay", "oracle", "exec"):
            raise UsageError(f"unknown scorer kind: {self.kind!r}")
        required = {
            "builtin": self.model_path,
            "replay": self.trace_path,
            "oracle": self.truth_path,
            "exec": self.command,
        }[self.kind]
        if not required:
            raise UsageError(f"scorer kind {self.kind!r} is missing its required parameter")


class Scorer:
    """Backend interface; subclasses provide raw (unclamped) scores."""

    backend = "abstract"
    allow_parallel = False

    def raw_scores(self, solution: Solution) -> list[float]:
        raise NotImplementedError

    def raw_scores_many(self, solutions: Sequence[Solution]) -> dict[str, list[float]]:
        return {sol.id: self.raw_scores(sol) for sol in solutions}

    def close(self) -> None:
        pass


class BuiltinScorer(Scorer):
    backend = "builtin"
    allow_parallel = True

    def __init__(self, model: VerifierModel) -> None:
        self.model = model

    def raw_scores(self, solution: Solution) -> list[float]:
        return predict_solution(self.model, solution)


class ReplayScorer(Scorer):
    backend = "replay"
    allow_parallel = True

    def __init__(self, raw_store: Mapping[str, list[float]]) -> None:
        self.raw_store = raw_store

    def raw_scores(self, solution: Solution) -> list[float]:
        raw = self.raw_store.get(solution.id)
        if raw is None:
            raise BackendError(f"replay store missing solution {solution.id!r}")
        return list(raw)


class OracleScorer(Scorer):
    """Closed-form world values, optionally perturbed by lognormal
    multiplicative noise (seeded per solution, so results are order-free)."""

    backend = "oracle"
    allow_parallel = True

    def __init__(
        self,
        truth: Mapping[str, synthworld.SolutionTruth],
        p_mistake: float,
        noise_sigma: float = 0.0,
        noise_seed: int = 0,
    ) -> None:
        self.truth = truth
        self.p_mistake = p_mistake
        self.noise_sigma = noise_sigma
        self.noise_seed = noise_seed

    def raw_scores(self, solution: Solution) -> list[float]:
        entry = self.truth.get(solution.id)
        if entry is None:
            raise BackendError(f"truth sidecar missing solution {solution.id!r}")
        scores = synthworld.oracle_scores(entry, solution.num_steps, self.p_mistake)
        if self.noise_sigma > 0.0:
            rng = np.random.default_rng(derive_seed(self.noise_seed, "noise", solution.id))
            factors = np.exp(self.noise_sigma * rng.standard_normal(len(scores)))
            scores = [s * f for s, f in zip(scores, factors)]
        return scores


class ExecScorer(Scorer):
    """External child process speaking the line protocol; serialized per child."""

    backend = "exec"
    allow_parallel = False

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
                raise BackendError(f"cannot start scorer process {self.command!r}: {exc}") from exc
        return self._proc

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin and not self._proc.stdin.closed:
                self._proc.stdin.close()
            self._proc.wait(timeout=30)
            self._proc = None

    @staticmethod
    def _parse_response(line: str, pending: Mapping[str, Solution]) -> tuple[str, list[float]]:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"scorer protocol violation ({exc.msg}) in line: {line.rstrip()}") from exc
        if not isinstance(msg, dict) or not isinstance(msg.get("rid"), str):
            raise BackendError(f"scorer protocol violation (missing rid) in line: {line.rstrip()}")
        rid = msg["rid"]
        if rid not in pending:
            raise BackendError(f"scorer protocol violation (unknown rid {rid!r}) in line: {line.rstrip()}")
        scores = msg.get("scores")
        if not isinstance(scores, list) or not all(
            isinstance(s, (int, float)) and not isinstance(s, bool) and math.isfinite(s)
            for s in scores
        ):
            raise BackendError(f"scorer protocol violation (bad scores) in line: {line.rstrip()}")
        if len(scores) != pending[rid].num_steps:
            raise BackendError(
                f"scorer protocol violation (got {len(scores)} scores for "
                f"{pending[rid].num_steps} steps) in line: {line.rstrip()}"
            )
        if any(s < 0.0 or s > 1.0 for s in scores):
            raise BackendError(f"scorer protocol violation (score outside [0,1]) in line: {line.rstrip()}")
        return rid, [float(s) for s in scores]

    def raw_scores_many(self, solutions: Sequence[Solution]) -> dict[str, list[float]]:
        if not solutions:
            return {}
        proc = self._ensure_proc()
        assert proc.stdin is not None and proc.stdout is not None
        pending = {sol.id: sol for sol in solutions}

        def _write_requests() -> None:
            try:
                for sol in solutions:
                    request = {"rid": sol.id, "question": sol.question, "steps": list(sol.steps)}
                    proc.stdin.write(json.dumps(request, ensure_ascii=False) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass  # reader reports the process failure with its stderr

        writer = threading.Thread(target=_write_requests, daemon=True)
        writer.start()
        results: dict[str, list[float]] = {}
        while len(results) < len(solutions):
            line = proc.stdout.readline()
            if line == "":
                writer.join(timeout=5)
                stderr = proc.stderr.read() if proc.stderr else ""
                self._proc = None
                raise BackendError(
                    f"scorer process exited after {len(results)}/{len(solutions)} responses"
                    + (f"; stderr: {stderr.strip()[-500:]}" if stderr.strip() else "")
                )
            if not line.strip():
                continue
            rid, scores = self._parse_response(line, pending)
            if rid in results:
                raise BackendError(f"scorer protocol violation: duplicate response for rid {rid!r}")
            results[rid] = scores
        writer.join(timeout=5)
        return results

    def raw_scores(self, solution: Solution) -> list[float]:
        return self.raw_scores_many([solution])[solution.id]


def make_scorer(spec: ScorerSpec) -> Scorer:
    if spec.kind == "builtin":
        return BuiltinScorer(VerifierModel.load(spec.model_path))
    if spec.kind == "replay":
        return ReplayScorer(read_raw_scores(spec.trace_path))
    if spec.kind == "oracle":
        return OracleScorer(
            synthworld.read_truth(spec.truth_path),
            p_mistake=spec.p_mistake,
            noise_sigma=spec.noise_sigma,
            noise_seed=spec.noise_seed,
        )
    return ExecScorer(spec.command)


def score_solution(scorer: Scorer | ScorerSpec, solution: Solution) -> ConfidenceTrace:
    if isinstance(scorer, ScorerSpec):
        scorer = make_scorer(scorer)
    raw = scorer.raw_scores(solution)
    return _trace_from_raw(scorer.backend, solution, raw)


def _trace_from_raw(backend: str, solution: Solution, raw: Sequence[float]) -> ConfidenceTrace:
    if len(raw) != solution.num_steps:
        raise BackendError(
            f"backend {backend!r} returned {len(raw)} scores for solution "
            f"{solution.id!r} with {solution.num_steps} steps"
        )
    scores, clamp_count = clamp_scores(raw)
    return ConfidenceTrace(
        solution_id=solution.id, scores=scores, backend=backend, clamp_count=clamp_count
    )


def score_set(
    scorer: Scorer | ScorerSpec,
    sset: SolutionSet,
    workers: int = 1,
    fail_fast: bool = True,
) -> dict[str, ConfidenceTrace]:
    """Traces for every solution; content is independent of worker count."""
    if isinstance(scorer, ScorerSpec):
        scorer = make_scorer(scorer)
    solutions = list(sset.solutions())
    traces: dict[str, ConfidenceTrace] = {}
    failures: list[str] = []

    if isinstance(scorer, ExecScorer):
        raw_map = scorer.raw_scores_many(solutions)
        for sol in solutions:
            traces[sol.id] = _trace_from_raw(scorer.backend, sol, raw_map[sol.id])
        return traces

    def _one(sol: Solution) -> ConfidenceTrace:
        return _trace_from_raw(scorer.backend, sol, scorer.raw_scores(sol))

    if workers > 1 and scorer.allow_parallel:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for sol, outcome in zip(solutions, pool.map(lambda s: _try(_one, s), solutions)):
                if isinstance(outcome, Exception):
                    if fail_fast:
                        raise BackendError(f"scoring failed for {sol.id!r}: {outcome}")
                    failures.append(sol.id)
                else:
                    traces[sol.id] = outcome
    else:
        for sol in solutions:
            try:
                traces[sol.id] = _one(sol)
            except Exception as exc:
                if fail_fast:
                    raise BackendError(f"scoring failed for {sol.id!r}: {exc}") from exc
                failures.append(sol.id)
    if failures:
        raise BackendError(f"scoring failed for {len(failures)} solutions: {failures[:10]}")
    return traces


def _try(fn, arg):
    try:
        return fn(arg)
    except Exception as exc:  # collected by the caller
        return exc


def write_trace_store(path: str | Path, traces: Mapping[str, ConfidenceTrace]) -> None:
    jsonl.write_records(
        path,
        (
            {
                "solution_id": sid,
                "scores": list(traces[sid].scores),
                "backend": traces[sid].backend,
            }
            for sid in sorted(traces)
        ),
    )


def read_raw_scores(path: str | Path) -> dict[str, list[float]]:
    """Stored score lists, unclamped: replay backends re-enter the clamp path."""
    raw: dict[str, list[float]] = {}
    for lineno, record in jsonl.read_records(path):
        try:
            sid = str(record["solution_id"])
            scores = [float(s) for s in record["scores"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad trace record: {exc}") from exc
        if sid in raw:
            raise DataError(f"{path}:{lineno}: duplicate trace for solution {sid!r}")
        raw[sid] = scores
    return raw


def read_trace_store(path: str | Path) -> dict[str, ConfidenceTrace]:
    traces: dict[str, ConfidenceTrace] = {}
    for lineno, record in jsonl.read_records(path):
        try:
            sid = str(record["solution_id"])
            raw = [float(s) for s in record["scores"]]
            backend = str(record.get("backend", "replay"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad trace record: {exc}") from exc
        if sid in traces:
            raise DataError(f"{path}:{lineno}: duplicate trace for solution {sid!r}")
        scores, clamp_count = clamp_scores(raw)
        traces[sid] = ConfidenceTrace(
            solution_id=sid, scores=scores, backend=backend, clamp_count=clamp_count
        )
    return traces
