"""Trainable prefix verifier.

The verifier maps a (question, step prefix) pair to a confidence in (0, 1)
via a logistic squash over a linear model. Features are four dense signals
(bias, fraction of correct marked calculations in the prefix, a flag for any
calculation mismatch, relative prefix position) plus signed-hash token-bigram
counts of the prefix text.

Two training modes share the same squared-error-per-prefix objective and
differ only in the target: outcome mode repeats the solution's final-answer
label at every prefix, process mode uses the per-step label for each prefix.
The total objective averages over questions, then over a question's
solutions, and sums over each solution's prefixes.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import jsonl
from .calcbench import VERDICT_MISMATCH, VERDICT_UNEVALUABLE, extract_calc_spans
from .corpus import Solution, SolutionSet
from .errors import DataError, UsageError

DENSE_SIZE = 4
# signed bigram counts are divided by this so the sparse block's squared norm
# is comparable to the dense block's; plain SGD needs the two on one scale
SPARSE_SCALE = 16.0
_TOKEN_RE = re.compile(r"[a-z0-9]+")
_Z_CLIP = 30.0  # keeps sigmoid strictly inside (0, 1) in float64


@dataclass(frozen=True)
class FeatureSpec:
    """Feature-space definition; its hash guards train/serve consistency."""

    dim: int = 1024
    max_steps: int = 8
    version: int = 1

    @property
    def spec_hash(self) -> str:
        payload = json.dumps(
            {"dim": self.dim, "max_steps": self.max_steps, "version": self.version},
            sort_keys=True,
        )
        return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()

    @property
    def num_weights(self) -> int:
        return DENSE_SIZE + self.dim


@dataclass(frozen=True)
class FeatureVector:
    dense: tuple[float, float, float, float]
    indices: tuple[int, ...]  # sparse indices, offset by DENSE_SIZE in the weight vector
    values: tuple[float, ...]
    spec_hash: str


def tokenize(text: str) -> list[str]:
    # digit-only runs collapse to one placeholder so operand noise does not
    # pollute the hashed feature space
    return ["#num" if tok.isdigit() else tok for tok in _TOKEN_RE.findall(text.lower())]


class _BigramHasher:
    """Caches the signed-hash bucket of each bigram string."""

    def __init__(self, dim: int) -> None:
        self.dim = dim
        self._cache: dict[str, tuple[int, float]] = {}

    def bucket(self, a: str, b: str) -> tuple[int, float]:
        key = a + "\x1f" + b
        hit = self._cache.get(key)
        if hit is None:
            raw = hashlib.blake2b(key.encode(), digest_size=8).digest()
            value = int.from_bytes(raw, "big")
            hit = (value % self.dim, 1.0 if value < (1 << 63) else -1.0)
            self._cache[key] = hit
        return hit


_HASHERS: dict[int, _BigramHasher] = {}


def _hasher(dim: int) -> _BigramHasher:
    hasher = _HASHERS.get(dim)
    if hasher is None:
        hasher = _HASHERS[dim] = _BigramHasher(dim)
    return hasher


def solution_features(
    question: str, steps: Sequence[str], spec: FeatureSpec
) -> list[FeatureVector]:
    """Feature vectors for every prefix of a solution, computed incrementally.

    Equivalent to calling extract_features per prefix; shared work (span
    evaluation, bigram hashing) is done once per step.
    """
    hasher = _hasher(spec.dim)
    spec_hash = spec.spec_hash
    counts: dict[int, float] = {}
    tokens = tokenize(question)
    for a, b in zip(tokens, tokens[1:]):
        idx, sign = hasher.bucket(a, b)
        counts[idx] = counts.get(idx, 0.0) + sign
    prev_last = tokens[-1] if tokens else None

    ok = evaluable = 0
    mismatch = False
    out: list[FeatureVector] = []
    for t, step in enumerate(steps, start=1):
        step_tokens = tokenize(step)
        chain = ([prev_last] if prev_last is not None else []) + step_tokens
        for a, b in zip(chain, chain[1:]):
            idx, sign = hasher.bucket(a, b)
            counts[idx] = counts.get(idx, 0.0) + sign
        if step_tokens:
            prev_last = step_tokens[-1]
        for span in extract_calc_spans(step, t):
            if span.verdict == VERDICT_UNEVALUABLE:
                continue
            evaluable += 1
            if span.verdict == VERDICT_MISMATCH:
                mismatch = True
            else:
                ok += 1
        dense = (
            1.0,
            ok / evaluable if evaluable else 1.0,
            1.0 if mismatch else 0.0,
            min(1.0, t / spec.max_steps),
        )
        items = sorted((idx, val) for idx, val in counts.items() if val != 0.0)
        out.append(
            FeatureVector(
                dense=dense,
                indices=tuple(idx for idx, _ in items),
                values=tuple(val / SPARSE_SCALE for _, val in items),
                spec_hash=spec_hash,
            )
        )
    return out


def extract_features(
    question: str, prefix: Sequence[str], max_steps: int = 8, dim: int = 1024
) -> FeatureVector:
    """Features for a single prefix; deterministic for fixed inputs and spec."""
    if not prefix:
        raise DataError("empty prefix")
    spec = FeatureSpec(dim=dim, max_steps=max_steps)
    return solution_features(question, prefix, spec)[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 4
    batch_size: int = 1
    seed: int = 0
    loss_mode: str = "outcome"  # "outcome" | "process"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise UsageError("learning rate must be positive")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch size must be >= 1")
        if self.loss_mode not in ("outcome", "process"):
            raise UsageError(f"unknown loss mode: {self.loss_mode!r}")


@dataclass
class VerifierModel:
    spec: FeatureSpec
    weights: np.ndarray  # length DENSE_SIZE + dim
    seed: int = 0
    train_config: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, spec: FeatureSpec, seed: int = 0) -> "VerifierModel":
        return cls(spec=spec, weights=np.zeros(spec.num_weights), seed=seed)

    def logit(self, fv: FeatureVector) -> float:
        if fv.spec_hash != self.spec.spec_hash:
            raise DataError(
                f"feature spec mismatch: model {self.spec.spec_hash}, features {fv.spec_hash}"
            )
        z = float(np.dot(self.weights[:DENSE_SIZE], fv.dense))
        if fv.indices:
            idx = np.asarray(fv.indices, dtype=np.intp) + DENSE_SIZE
            z += float(np.dot(self.weights[idx], fv.values))
        return z

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": 1,
            "feature_spec": {
                "dim": self.spec.dim,
                "max_steps": self.spec.max_steps,
                "version": self.spec.version,
            },
            "spec_hash": self.spec.spec_hash,
            "seed": self.seed,
            "train_config": self.train_config,
            "weights": [repr(w) for w in self.weights.tolist()],
        }
        jsonl.write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "VerifierModel":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read model file {path}: {exc}") from exc
        if doc.get("format_version") != 1:
            raise DataError(f"unsupported model format version: {doc.get('format_version')!r}")
        spec = FeatureSpec(**doc["feature_spec"])
        if spec.spec_hash != doc.get("spec_hash"):
            raise DataError("model file spec hash does not match its feature spec")
        weights = np.array([float(w) for w in doc["weights"]])
        if weights.shape[0] != spec.num_weights:
            raise DataError("model weight vector length does not match feature spec")
        return cls(spec=spec, weights=weights, seed=int(doc.get("seed", 0)),
                   train_config=doc.get("train_config", {}))


def _sigmoid(z: float) -> float:
    z = max(-_Z_CLIP, min(_Z_CLIP, z))
    return 1.0 / (1.0 + math.exp(-z))


def predict(model: VerifierModel, fv: FeatureVector) -> float:
    """Confidence strictly inside (0, 1)."""
    return _sigmoid(model.logit(fv))


def prefix_loss(pred: float, target: float) -> float:
    """Squared error of one prefix prediction against a binary target."""
    if target not in (0.0, 1.0, 0, 1):
        raise UsageError(f"target must be binary, got {target!r}")
    return (pred - target) ** 2


def prefix_loss_gradient(model: VerifierModel, fv: FeatureVector, target: float) -> np.ndarray:
    """d/dw (sigmoid(w.x) - y)^2, dense vector over all weights."""
    p = predict(model, fv)
    scale = 2.0 * (p - target) * p * (1.0 - p)
    grad = np.zeros_like(model.weights)
    grad[:DENSE_SIZE] = scale * np.asarray(fv.dense)
    if fv.indices:
        idx = np.asarray(fv.indices, dtype=np.intp) + DENSE_SIZE
        grad[idx] = scale * np.asarray(fv.values)
    return grad


def _targets_for_solution(
    sol: Solution,
    mode: str,
    outcome_targets: Mapping[str, int] | None,
    process_targets: Mapping[str, Sequence[int]] | None,
) -> list[float]:
    if mode == "outcome":
        if outcome_targets is None or sol.id not in outcome_targets:
            raise DataError(f"missing outcome label for solution {sol.id!r}")
        return [float(outcome_targets[sol.id])] * sol.num_steps
    if process_targets is None or sol.id not in process_targets:
        raise DataError(f"missing process labels for solution {sol.id!r}")
    labels = process_targets[sol.id]
    if len(labels) != sol.num_steps:
        raise DataError(
            f"process labels for {sol.id!r} have length {len(labels)}, expected {sol.num_steps}"
        )
    return [float(y) for y in labels]


def total_loss(
    model: VerifierModel,
    sset: SolutionSet,
    mode: str = "outcome",
    outcome_targets: Mapping[str, int] | None = None,
    process_targets: Mapping[str, Sequence[int]] | None = None,
) -> float:
    """Mean over questions of mean over solutions of summed per-prefix losses.

    Accumulation runs in canonical (sorted) order, so the value is invariant
    under permutation of the input's solutions and questions.
    """
    if not sset.groups:
        raise DataError("empty solution set")
    question_terms: list[float] = []
    for qid in sorted(sset.groups):
        group = sorted(sset.groups[qid], key=lambda s: s.id)
        solution_terms = []
        for sol in group:
            targets = _targets_for_solution(sol, mode, outcome_targets, process_targets)
            fvs = solution_features(sol.question, sol.steps, model.spec)
            solution_terms.append(
                sum(prefix_loss(predict(model, fv), y) for fv, y in zip(fvs, targets))
            )
        question_terms.append(sum(solution_terms) / len(solution_terms))
    return sum(question_terms) / len(question_terms)


@dataclass
class _ExampleBank:
    dense: np.ndarray     # (N, 4)
    idx: np.ndarray       # concatenated sparse indices (already offset)
    val: np.ndarray       # concatenated sparse values
    offsets: np.ndarray   # (N + 1,) slice bounds into idx/val
    targets: np.ndarray   # (N,)


def _build_examples(
    sset: SolutionSet,
    spec: FeatureSpec,
    mode: str,
    outcome_targets: Mapping[str, int] | None,
    process_targets: Mapping[str, Sequence[int]] | None,
) -> _ExampleBank:
    dense_rows: list[tuple[float, float, float, float]] = []
    idx_chunks: list[np.ndarray] = []
    val_chunks: list[np.ndarray] = []
    lengths: list[int] = []
    targets: list[float] = []
    for sol in sset.solutions():
        ys = _targets_for_solution(sol, mode, outcome_targets, process_targets)
        for fv, y in zip(solution_features(sol.question, sol.steps, spec), ys):
            dense_rows.append(fv.dense)
            idx_chunks.append(np.asarray(fv.indices, dtype=np.intp) + DENSE_SIZE)
            val_chunks.append(np.asarray(fv.values))
            lengths.append(len(fv.indices))
            targets.append(y)
    offsets = np.zeros(len(lengths) + 1, dtype=np.intp)
    np.cumsum(lengths, out=offsets[1:])
    return _ExampleBank(
        dense=np.asarray(dense_rows),
        idx=np.concatenate(idx_chunks) if idx_chunks else np.zeros(0, dtype=np.intp),
        val=np.concatenate(val_chunks) if val_chunks else np.zeros(0),
        offsets=offsets,
        targets=np.asarray(targets),
    )


def train(
    sset: SolutionSet,
    config: TrainConfig,
    outcome_targets: Mapping[str, int] | None = None,
    process_targets: Mapping[str, Sequence[int]] | None = None,
    spec: FeatureSpec | None = None,
) -> VerifierModel:
    """Seeded SGD over per-prefix examples, zero-initialized weights.

    Single-threaded by contract: the gradient application order is derived
    only from the seed, so a given (corpus, config) pair always yields the
    same weights.
    """
    if not sset.groups:
        raise DataError("empty training set")
    spec = spec or FeatureSpec()
    bank = _build_examples(sset, spec, config.loss_mode, outcome_targets, process_targets)
    n = bank.targets.shape[0]
    w = np.zeros(spec.num_weights)
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            if config.batch_size == 1:
                j = int(batch[0])
                lo, hi = bank.offsets[j], bank.offsets[j + 1]
                idx = bank.idx[lo:hi]
                z = float(np.dot(w[:DENSE_SIZE], bank.dense[j])) + float(np.dot(w[idx], bank.val[lo:hi]))
                p = _sigmoid(z)
                g = lr * 2.0 * (p - bank.targets[j]) * p * (1.0 - p)
                if g != 0.0:
                    w[:DENSE_SIZE] -= g * bank.dense[j]
                    w[idx] -= g * bank.val[lo:hi]
            else:
                dense_grad = np.zeros(DENSE_SIZE)
                sparse_updates: dict[int, float] = {}
                for j in batch:
                    j = int(j)
                    lo, hi = bank.offsets[j], bank.offsets[j + 1]
                    idx = bank.idx[lo:hi]
                    z = float(np.dot(w[:DENSE_SIZE], bank.dense[j])) + float(np.dot(w[idx], bank.val[lo:hi]))
                    p = _sigmoid(z)
                    g = 2.0 * (p - bank.targets[j]) * p * (1.0 - p)
                    dense_grad += g * bank.dense[j]
                    for i, v in zip(idx, bank.val[lo:hi]):
                        sparse_updates[int(i)] = sparse_updates.get(int(i), 0.0) + g * float(v)
                scale = lr / len(batch)
                w[:DENSE_SIZE] -= scale * dense_grad
                for i, g in sorted(sparse_updates.items()):
                    w[i] -= scale * g
    return VerifierModel(
        spec=spec,
        weights=w,
        seed=config.seed,
        train_config={
            "learning_rate": config.learning_rate,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "seed": config.seed,
            "loss_mode": config.loss_mode,
        },
    )


def predict_solution(model: VerifierModel, sol: Solution) -> list[float]:
    """Per-prefix confidences for one solution."""
    return [predict(model, fv) for fv in solution_features(sol.question, sol.steps, model.spec)]


def mean_prefix_mse(
    model: VerifierModel,
    sset: SolutionSet,
    outcome_targets: Mapping[str, int],
) -> float:
    """Held-out diagnostic: mean squared error over all prefixes."""
    total = 0.0
    count = 0
    for sol in sset.solutions():
        y = float(outcome_targets[sol.id])
        for p in predict_solution(model, sol):
            total += (p - y) ** 2
            count += 1
    if count == 0:
        raise DataError("no prefixes to evaluate")
    return total / count
