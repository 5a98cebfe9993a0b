"""Process labels from relative confidence changes, with no gold answers.

The relative change between adjacent prefixes is
(score[t+1] - score[t]) / score[t]. Each delta is evaluated in exact rational
arithmetic on the float score values and rounded once to a float, so the
result is the correctly-rounded value of the formula (float subtraction
followed by float division can land one ulp off). Because upstream clamping
keeps scores in [1e-6, 1 - 1e-6], every delta is finite and > -1, and the
deltas are invariant under rescaling a whole trace.

Labeling follows a first-error rule: step 1 is labeled 1 (it has no incoming
transition — a wrong *first* step is a documented blind spot of adjacent-step
deltas); step t+1 is the first error iff its delta is <= the negative
threshold; every step at or after the first error is labeled 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import jsonl
from .corpus import SolutionSet
from .errors import DataError, UsageError
from .scorer import ConfidenceTrace

DEFAULT_THRESHOLD = -0.5

PROVENANCE_AUTOPSV = "autopsv"
PROVENANCE_MCTS = "mcts"
PROVENANCE_GROUND_TRUTH = "ground-truth"


@dataclass(frozen=True)
class Provenance:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class DeltaTrace:
    solution_id: str
    deltas: tuple[float, ...]  # deltas[i] covers the transition step i+1 -> i+2 (1-based)


@dataclass(frozen=True)
class ProcessLabels:
    solution_id: str
    labels: tuple[int, ...]
    soft_values: tuple[float, ...] | None
    first_error: int | None  # 1-based index of the first 0 label
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.labels or any(y not in (0, 1) for y in self.labels):
            raise DataError(f"labels for {self.solution_id!r} must be non-empty binaries")
        zeros = [t for t, y in enumerate(self.labels, start=1) if y == 0]
        expected_first = zeros[0] if zeros else None
        if self.first_error != expected_first:
            raise DataError(
                f"labels for {self.solution_id!r}: first_error {self.first_error!r} "
                f"inconsistent with labels"
            )
        if zeros and zeros != list(range(zeros[0], len(self.labels) + 1)):
            raise DataError(f"labels for {self.solution_id!r} violate the first-error staircase")
        if self.soft_values is not None and len(self.soft_values) != len(self.labels):
            raise DataError(f"soft values for {self.solution_id!r} have wrong length")


def delta_conf(trace: ConfidenceTrace) -> DeltaTrace:
    """Relative confidence changes; empty for single-step traces.

    With prev = p/q and cur = r/s exact (as_integer_ratio), the change is the
    rational (r*q - p*s) / (s*p); integer true division rounds it correctly.
    """
    deltas: list[float] = []
    p, q = trace.scores[0].as_integer_ratio()
    for score in trace.scores[1:]:
        r, s = score.as_integer_ratio()
        deltas.append((r * q - p * s) / (s * p))
        p, q = r, s
    return DeltaTrace(solution_id=trace.solution_id, deltas=tuple(deltas))


def staircase_labels(solution_id: str, num_steps: int, first_error: int | None,
                     soft_values: Sequence[float] | None, provenance: Provenance) -> ProcessLabels:
    if first_error is not None and not (1 <= first_error <= num_steps):
        raise DataError(f"first_error {first_error} out of range for {num_steps} steps")
    labels = tuple(
        1 if (first_error is None or t < first_error) else 0 for t in range(1, num_steps + 1)
    )
    return ProcessLabels(
        solution_id=solution_id,
        labels=labels,
        soft_values=None if soft_values is None else tuple(soft_values),
        first_error=first_error,
        provenance=provenance,
    )


def label_process(trace: ConfidenceTrace, threshold: float = DEFAULT_THRESHOLD) -> ProcessLabels:
    """First-error labels for one trace: step t+1 errs iff delta[t] <= threshold."""
    if not threshold < 0:
        raise UsageError("threshold must be negative")
    deltas = delta_conf(trace).deltas
    first_error: int | None = None
    for i, delta in enumerate(deltas):
        if delta <= threshold:
            first_error = i + 2  # delta i covers the transition into step i+2 (1-based)
            break
    return staircase_labels(
        trace.solution_id,
        len(trace.scores),
        first_error,
        None,
        Provenance(PROVENANCE_AUTOPSV, {"threshold": threshold}),
    )


def from_gold_labels(solution_id: str, gold_labels: Sequence[int]) -> ProcessLabels:
    """Wrap generator-side ground-truth step labels."""
    zeros = [t for t, y in enumerate(gold_labels, start=1) if y == 0]
    return staircase_labels(
        solution_id,
        len(gold_labels),
        zeros[0] if zeros else None,
        None,
        Provenance(PROVENANCE_GROUND_TRUTH, {}),
    )


def relabel_set(
    sset: SolutionSet,
    traces: Mapping[str, ConfidenceTrace],
    threshold: float = DEFAULT_THRESHOLD,
) -> dict[str, ProcessLabels]:
    """Labels for every solution in the set; requires no gold answers."""
    missing = [sol.id for sol in sset.solutions() if sol.id not in traces]
    if missing:
        raise DataError(f"trace store missing {len(missing)} solutions: {missing[:10]}")
    labels: dict[str, ProcessLabels] = {}
    for sol in sset.solutions():
        trace = traces[sol.id]
        if len(trace) != sol.num_steps:
            raise DataError(
                f"trace for {sol.id!r} has {len(trace)} scores, solution has {sol.num_steps} steps"
            )
        labels[sol.id] = label_process(trace, threshold)
    return labels


def delta_store(traces: Mapping[str, ConfidenceTrace]) -> dict[str, tuple[float, ...]]:
    return {sid: delta_conf(trace).deltas for sid, trace in traces.items()}


def write_label_store(path: str | Path, labels: Mapping[str, ProcessLabels]) -> None:
    def _records():
        for sid in sorted(labels):
            entry = labels[sid]
            record: dict[str, Any] = {
                "solution_id": sid,
                "labels": list(entry.labels),
                "provenance": {"kind": entry.provenance.kind, "params": entry.provenance.params},
            }
            if entry.soft_values is not None:
                record["soft_values"] = list(entry.soft_values)
            if entry.first_error is not None:
                record["first_error"] = entry.first_error
            yield record

    jsonl.write_records(path, _records())


def read_label_store(path: str | Path) -> dict[str, ProcessLabels]:
    labels: dict[str, ProcessLabels] = {}
    for lineno, record in jsonl.read_records(path):
        try:
            sid = str(record["solution_id"])
            raw_labels = tuple(int(y) for y in record["labels"])
            prov = record["provenance"]
            provenance = Provenance(str(prov["kind"]), dict(prov.get("params", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad label record: {exc}") from exc
        soft = record.get("soft_values")
        labels[sid] = ProcessLabels(
            solution_id=sid,
            labels=raw_labels,
            soft_values=None if soft is None else tuple(float(v) for v in soft),
            first_error=record.get("first_error"),
            provenance=provenance,
        )
    return labels
