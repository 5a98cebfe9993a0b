"""Response selection and evaluation: best-of-k, self-consistency, pass@k.

The evaluation protocol draws k of each question's n candidates per repeat,
measures self-consistency and verifier selection accuracy on the drawn
subsets, and reports means with a 95% confidence half-width from a normal
approximation over the repeat means (the CI method is recorded in every
report). pass@k uses the unbiased estimator 1 - C(n-c, k)/C(n, k) over the
full candidate pool, computed in a multiplicative form that cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import CanonicalAnswer, Solution, SolutionSet, normalize_answer
from .errors import DataError, UsageError
from .scorer import ConfidenceTrace
from .seeds import derive_seed

METHOD_FINAL = "final-value"
METHOD_PRODUCT = "product"
METHOD_MINIMUM = "minimum"
METHODS = (METHOD_FINAL, METHOD_PRODUCT, METHOD_MINIMUM)

CI_METHOD = "normal-approximation-over-repeats"
_Z95 = 1.959963984540054


def aggregate(trace: ConfidenceTrace, method: str) -> float:
    """Reduce a trace to one solution-level score."""
    if method == METHOD_FINAL:
        return trace.scores[-1]
    if method == METHOD_PRODUCT:
        return math.exp(sum(math.log(s) for s in trace.scores))
    if method == METHOD_MINIMUM:
        return min(trace.scores)
    raise UsageError(f"unknown aggregation method: {method!r}")


def _aggregate_key(trace: ConfidenceTrace, method: str) -> float:
    # product compares in log space so long low-score traces cannot underflow
    # to indistinguishable zeros; log is increasing, so the argmax is the same
    if method == METHOD_PRODUCT:
        return sum(math.log(s) for s in trace.scores)
    return aggregate(trace, method)


def select_best(
    candidates: Sequence[tuple[Solution, ConfidenceTrace]], method: str = METHOD_PRODUCT
) -> int:
    """Index of the highest-aggregate candidate; ties go to the lowest index."""
    if not candidates:
        raise UsageError("select_best needs at least one candidate")
    best_index = 0
    best_key = _aggregate_key(candidates[0][1], method)
    for i in range(1, len(candidates)):
        key = _aggregate_key(candidates[i][1], method)
        if key > best_key:
            best_index, best_key = i, key
    return best_index


def self_consistency(candidates: Sequence[Solution]) -> CanonicalAnswer:
    """Majority vote over normalized final answers; ties break to the answer
    whose first occurrence is earliest."""
    if not candidates:
        raise UsageError("self_consistency needs at least one candidate")
    counts: dict[tuple[str, str], int] = {}
    first_seen: dict[tuple[str, str], int] = {}
    canon: dict[tuple[str, str], CanonicalAnswer] = {}
    for i, sol in enumerate(candidates):
        answer = normalize_answer(sol.final_answer)
        key = answer.key()
        counts[key] = counts.get(key, 0) + 1
        if key not in first_seen:
            first_seen[key] = i
            canon[key] = answer
    winner = min(counts, key=lambda key: (-counts[key], first_seen[key]))
    return canon[winner]


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k)."""
    if not (0 <= c <= n):
        raise UsageError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not (1 <= k <= n):
        raise UsageError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    # prod_{i=n-c+1..n} (1 - k/i), stable for n up to 10^4 and beyond
    product = 1.0
    for i in range(n - c + 1, n + 1):
        product *= 1.0 - k / i
    return 1.0 - product


@dataclass(frozen=True)
class MetricValue:
    mean: float
    ci_half_width: float


@dataclass(frozen=True)
class SelectionReport:
    k: int
    n: int
    repeats: int
    pass_1: float
    pass_k: float
    pass_k_empirical: MetricValue
    self_consistency_acc: MetricValue
    verifier_acc: dict[str, dict[str, MetricValue]]  # store name -> method -> value
    ci_method: str = CI_METHOD

    def record(self, dataset: str = "synthetic") -> dict[str, object]:
        return {
            "dataset": dataset,
            "k": self.k,
            "n": self.n,
            "repeats": self.repeats,
            "ci_method": self.ci_method,
            "pass_1": self.pass_1,
            "pass_k": self.pass_k,
            "pass_k_empirical": self.pass_k_empirical.mean,
            "pass_k_empirical_ci": self.pass_k_empirical.ci_half_width,
            "self_consistency": self.self_consistency_acc.mean,
            "self_consistency_ci": self.self_consistency_acc.ci_half_width,
            "verifiers": {
                name: {
                    method: {"acc": mv.mean, "ci": mv.ci_half_width}
                    for method, mv in methods.items()
                }
                for name, methods in self.verifier_acc.items()
            },
        }


def _metric(values: Sequence[float]) -> MetricValue:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    if arr.size < 2:
        return MetricValue(mean, 0.0)
    half = _Z95 * float(arr.std(ddof=1)) / math.sqrt(arr.size)
    return MetricValue(mean, half)


def evaluate(
    sset: SolutionSet,
    trace_stores: Mapping[str, Mapping[str, ConfidenceTrace]],
    outcome: Mapping[str, int],
    k: int,
    repeats: int = 5,
    seed: int = 0,
    methods: Sequence[str] = METHODS,
) -> SelectionReport:
    """Draw k of n per question per repeat; score SC and each verifier store."""
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    qids = sorted(sset.groups)
    if not qids:
        raise DataError("empty solution set")
    groups: dict[str, list[Solution]] = {}
    sizes = set()
    for qid in qids:
        group = sorted(sset.groups[qid], key=lambda s: s.id)
        groups[qid] = group
        sizes.add(len(group))
    if len(sizes) != 1:
        raise DataError(f"questions have unequal candidate counts: {sorted(sizes)}")
    n = sizes.pop()
    if k > n:
        raise UsageError(f"k={k} exceeds candidates per question n={n}")
    for qid in qids:
        for sol in groups[qid]:
            if sol.id not in outcome:
                raise DataError(f"missing outcome label for solution {sol.id!r}")
            for name, store in trace_stores.items():
                if sol.id not in store:
                    raise DataError(f"trace store {name!r} missing solution {sol.id!r}")

    correct_counts = {qid: sum(outcome[sol.id] for sol in groups[qid]) for qid in qids}
    pass_1 = float(np.mean([correct_counts[qid] / n for qid in qids]))
    pass_k = float(np.mean([pass_at_k(n, correct_counts[qid], k) for qid in qids]))

    sc_by_repeat: list[float] = []
    empirical_by_repeat: list[float] = []
    verifier_by_repeat: dict[str, dict[str, list[float]]] = {
        name: {method: [] for method in methods} for name in trace_stores
    }
    for repeat in range(repeats):
        rng = np.random.default_rng(derive_seed(seed, "select", repeat))
        sc_hits = 0
        empirical_hits = 0
        verifier_hits = {name: {method: 0 for method in methods} for name in trace_stores}
        for qid in qids:
            group = groups[qid]
            if k == n:
                drawn = group
            else:
                picked = np.sort(rng.choice(n, size=k, replace=False))
                drawn = [group[int(i)] for i in picked]
            labels = [outcome[sol.id] for sol in drawn]
            empirical_hits += 1 if any(labels) else 0

            majority = self_consistency(drawn)
            majority_key = majority.key()
            for sol, label in zip(drawn, labels):
                if normalize_answer(sol.final_answer).key() == majority_key:
                    sc_hits += label
                    break

            for name, store in trace_stores.items():
                cands = [(sol, store[sol.id]) for sol in drawn]
                for method in methods:
                    picked_index = select_best(cands, method)
                    verifier_hits[name][method] += labels[picked_index]
        num_q = len(qids)
        sc_by_repeat.append(sc_hits / num_q)
        empirical_by_repeat.append(empirical_hits / num_q)
        for name in trace_stores:
            for method in methods:
                verifier_by_repeat[name][method].append(verifier_hits[name][method] / num_q)

    return SelectionReport(
        k=k,
        n=n,
        repeats=repeats,
        pass_1=pass_1,
        pass_k=pass_k,
        pass_k_empirical=_metric(empirical_by_repeat),
        self_consistency_acc=_metric(sc_by_repeat),
        verifier_acc={
            name: {method: _metric(values) for method, values in by_method.items()}
            for name, by_method in verifier_by_repeat.items()
        },
    )
