"""Acceptance suite: one test per criterion, each printing a PASS line.

Heavy artifacts (the trained verifiers and their corpora) are built once in
module-scoped fixtures; every criterion that depends on them counts the
shared build time against its own runtime budget.
"""

from __future__ import annotations

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (
    OracleEvalError,
    exact_deltas,
    pass_at_k_enumerated,
    random_expression,
    shunting_yard_eval,
)
from stepverify import annotate, calcbench, corpus, mcts, scorer, selection, synthworld, verifier
from stepverify.scorer import EPSILON, ConfidenceTrace, OracleScorer

DURATIONS: dict[str, float] = {}


def _timed(key):
    class _Timer:
        def __enter__(self):
            self.start = time.monotonic()
            return self

        def __exit__(self, *exc):
            DURATIONS[key] = DURATIONS.get(key, 0.0) + time.monotonic() - self.start

    return _Timer()


def _report(name: str, budget_s: float, spent: float) -> None:
    assert spent < budget_s, f"{name} exceeded its runtime budget: {spent:.1f}s >= {budget_s}s"
    print(f"ACCEPTANCE {name}: PASS ({spent:.1f}s / budget {budget_s:.0f}s)")


def _random_traces(count: int, seed: int) -> list[ConfidenceTrace]:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(2, 9, size=count)
    traces = []
    for i, m in enumerate(lengths):
        scores = rng.uniform(EPSILON, 1.0 - EPSILON, size=int(m))
        traces.append(ConfidenceTrace(f"t{i}", tuple(float(s) for s in scores), "random"))
    return traces


# ---------------------------------------------------------------------------
# shared heavy fixtures (criteria 6 and 7)
# ---------------------------------------------------------------------------

P_MISTAKE = 0.2
TRAIN_CONFIG = synthworld.WorldConfig(
    seed=101, questions=2000, solutions_per_question=10,
    error_model="stepwise", p_mistake=P_MISTAKE,
)
HELDOUT_CONFIG = synthworld.WorldConfig(
    seed=909, questions=300, solutions_per_question=10,
    error_model="stepwise", p_mistake=P_MISTAKE,
)
EVAL_CONFIG = synthworld.WorldConfig(
    seed=707, questions=250, solutions_per_question=10,
    error_model="stepwise", p_mistake=P_MISTAKE,
)


@pytest.fixture(scope="module")
def trained_osv():
    with _timed("osv_train"):
        sset, truth = synthworld.gen_corpus(TRAIN_CONFIG)
        outcomes = corpus.label_set(sset)
        model = verifier.train(
            sset, verifier.TrainConfig(learning_rate=0.1, epochs=4, seed=13),
            outcome_targets=outcomes,
        )
    return sset, truth, outcomes, model


@pytest.fixture(scope="module")
def trained_psv(trained_osv):
    sset, _, _, osv = trained_osv
    with _timed("psv_train"):
        traces = scorer.score_set(scorer.BuiltinScorer(osv), sset)
        labels = annotate.relabel_set(sset, traces, annotate.DEFAULT_THRESHOLD)
        psv = verifier.train(
            sset, verifier.TrainConfig(learning_rate=0.1, epochs=4, seed=14, loss_mode="process"),
            process_targets={sid: list(entry.labels) for sid, entry in labels.items()},
        )
    return psv


def test_c01_relative_change_exactness():
    with _timed("c1"):
        traces = _random_traces(100_000, seed=1)
        for trace in traces:
            ours = list(annotate.delta_conf(trace).deltas)
            reference = exact_deltas(list(trace.scores))
            assert ours == reference  # bit-for-bit
        probe = ConfidenceTrace("probe", (0.8, 0.2), "manual")
        assert annotate.delta_conf(probe).deltas == (-0.75,)
    _report("C1 relative-change-exactness", 5.0, DURATIONS["c1"])


def test_c02_first_error_propagation():
    with _timed("c2"):
        rng = np.random.default_rng(2)
        traces = _random_traces(100_000, seed=3)
        for trace in traces:
            theta2 = float(rng.uniform(-0.95, -0.05))
            theta1 = theta2 - float(rng.uniform(0.01, 0.5))  # strictly more negative
            labels1 = annotate.label_process(trace, theta1)
            labels2 = annotate.label_process(trace, theta2)
            for entry in (labels1, labels2):
                seq = entry.labels
                assert all(a >= b for a, b in zip(seq, seq[1:]))  # monotone staircase
            if labels1.first_error is not None:  # subset property under ordering
                assert labels2.first_error is not None
                assert labels2.first_error <= labels1.first_error
    _report("C2 first-error-propagation", 10.0, DURATIONS["c2"])


def test_c03_pass_at_k_oracle_equivalence():
    with _timed("c3"):
        for n in range(1, 13):
            for c in range(n + 1):
                for k in range(1, n + 1):
                    estimator = selection.pass_at_k(n, c, k)
                    enumerated = pass_at_k_enumerated(n, c, k)
                    assert abs(estimator - enumerated) <= 1e-12, (n, c, k)
        for n in (25, 60, 120, 200):
            for c in range(0, n + 1, max(1, n // 17)):
                values = [selection.pass_at_k(n, c, k) for k in range(1, n + 1)]
                assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
            for k in (1, 2, n // 2, n):
                values = [selection.pass_at_k(n, c, k) for c in range(n + 1)]
                assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
    _report("C3 pass-at-k-oracle-equivalence", 30.0, DURATIONS["c3"])


def test_c04_expression_evaluator_cross_check():
    with _timed("c4"):
        rng = np.random.default_rng(4)
        agreements = 0
        while agreements < 10_000:
            expr = random_expression(rng)
            try:
                ours = calcbench.eval_expr(expr)
                ours_failed = False
            except calcbench.CalcEvalError:
                ours_failed = True
            try:
                reference = shunting_yard_eval(expr)
                reference_failed = False
            except OracleEvalError:
                reference_failed = True
            assert ours_failed == reference_failed, expr
            if not ours_failed:
                assert ours == reference, expr  # exact rational equality
            agreements += 1
        (span,) = calcbench.extract_calc_spans("<< 500*52=260 >>")
        assert span.verdict == calcbench.VERDICT_MISMATCH
        (span,) = calcbench.extract_calc_spans("<<10,000/20 = 500>>")
        assert span.verdict == calcbench.VERDICT_CORRECT
    _report("C4 expression-evaluator-cross-check", 10.0, DURATIONS["c4"])


def test_c05_oracle_world_detection():
    with _timed("c5"):
        config = synthworld.WorldConfig(
            seed=505, questions=1000, solutions_per_question=5,
            p_error=0.5, p_mistake=P_MISTAKE, error_model="uniform",
        )
        sset, truth = synthworld.gen_corpus(config)

        clean_scorer = OracleScorer(truth, P_MISTAKE)
        traces = scorer.score_set(clean_scorer, sset)
        labels = annotate.relabel_set(sset, traces, -0.5)
        for sid, entry in labels.items():
            assert entry.labels == truth[sid].gold_labels  # 100% of solutions

        gt = calcbench.ground_truth(sset)
        deltas = annotate.delta_store(traces)
        clean_report = calcbench.detection_metrics(gt, deltas, -0.5)
        assert clean_report.precision == 1.0
        assert clean_report.recall == 1.0

        noisy_scorer = OracleScorer(truth, P_MISTAKE, noise_sigma=0.15, noise_seed=55)
        noisy_traces = scorer.score_set(noisy_scorer, sset)
        noisy_deltas = annotate.delta_store(noisy_traces)
        thetas = [-0.5, -0.6, -0.7, -0.8, -0.9]
        reports = calcbench.sweep(gt, noisy_deltas, thetas)
        precisions = [r.precision for r in reports]
        recalls = [r.recall for r in reports]
        f1s = [r.f1 for r in reports]
        assert all(a <= b + 1e-12 for a, b in zip(precisions, precisions[1:]))
        assert all(a >= b - 1e-12 for a, b in zip(recalls, recalls[1:]))
        assert max(f1s) - min(f1s) < 0.05
    _report("C5 oracle-world-detection", 120.0, DURATIONS["c5"])


def test_c06_calibration_at_desk_scale(trained_osv):
    _, _, _, model = trained_osv
    with _timed("c6"):
        held, held_truth = synthworld.gen_corpus(HELDOUT_CONFIG)
        held_outcomes = corpus.label_set(held)
        errors = []
        clean_full_errors = []
        for sol in held.solutions():
            entry = held_truth[sol.id]
            for t, p in enumerate(verifier.predict_solution(model, sol), start=1):
                oracle = synthworld.true_step_value(
                    synthworld.prefix_is_clean(entry, t), sol.num_steps - t, P_MISTAKE
                )
                errors.append(abs(p - oracle))
                if t == sol.num_steps and entry.error_step is None:
                    clean_full_errors.append(abs(p - 1.0))  # oracle value is 1
        mae = float(np.mean(errors))
        assert mae <= 0.10, f"calibration MAE {mae:.4f} exceeds 0.10"
        clean_full_mae = float(np.mean(clean_full_errors))
        assert clean_full_mae <= 0.10, f"clean full-prefix gap {clean_full_mae:.4f} exceeds 0.10"
        mse = verifier.mean_prefix_mse(model, held, held_outcomes)
        assert mse < 0.15, f"held-out per-prefix MSE {mse:.4f} exceeds 0.15"
    spent = DURATIONS["osv_train"] + DURATIONS["c6"]
    print(f"  calibration MAE {mae:.4f}, held-out per-prefix MSE {mse:.4f}")
    _report("C6 score-calibration", 300.0, spent)


def test_c07_relabeling_experiment(trained_osv, trained_psv):
    _, _, _, osv = trained_osv
    psv = trained_psv
    with _timed("c7"):
        eval_set, _ = synthworld.gen_corpus(EVAL_CONFIG)
        eval_outcomes = corpus.label_set(eval_set)
        osv_traces = scorer.score_set(scorer.BuiltinScorer(osv), eval_set)
        psv_traces = scorer.score_set(scorer.BuiltinScorer(psv), eval_set)
        report = selection.evaluate(
            eval_set, {"OSV": osv_traces, "OSV+PSV": psv_traces}, eval_outcomes,
            k=5, repeats=5, seed=77,
        )
        osv_acc = report.verifier_acc["OSV"][selection.METHOD_FINAL].mean
        psv_acc = report.verifier_acc["OSV+PSV"][selection.METHOD_PRODUCT].mean
        sc = report.self_consistency_acc.mean
        pool = report.pass_k_empirical.mean
        assert abs(osv_acc - psv_acc) <= 0.03, f"OSV {osv_acc:.4f} vs PSV {psv_acc:.4f}"
        assert osv_acc > sc and psv_acc > sc, f"verifiers {osv_acc:.4f}/{psv_acc:.4f} vs SC {sc:.4f}"
        assert osv_acc <= pool + 1e-12 and psv_acc <= pool + 1e-12
    spent = DURATIONS["osv_train"] + DURATIONS["psv_train"] + DURATIONS["c7"]
    print(
        f"  OSV {osv_acc:.4f}  PSV {psv_acc:.4f}  SC {sc:.4f}  "
        f"pass@5(empirical) {pool:.4f}  pass@5(unbiased) {report.pass_k:.4f}"
    )
    _report("C7 relabeling-experiment", 600.0, spent)


def test_c08_completion_sampling_comparison():
    with _timed("c8"):
        config = synthworld.WorldConfig(
            seed=808, questions=150, solutions_per_question=2,
            p_error=0.5, p_mistake=P_MISTAKE, error_model="uniform",
        )
        sset, truth = synthworld.gen_corpus(config)
        sampler = mcts.SynthWorldSampler(p_mistake=P_MISTAKE, run_seed=88)
        labels = mcts.label_set_mcts(sset, sampler, n=64, hard_rule=mcts.RULE_ANY_POSITIVE)
        agreement = mcts.agreement_with_truth(labels, truth)
        assert agreement >= 0.95, f"step agreement {agreement:.4f} below 0.95"

        within = 0
        total = 0
        for sol in sset.solutions():
            entry = truth[sol.id]
            soft = labels[sol.id].soft_values
            for t in range(1, sol.num_steps + 1):
                value = synthworld.true_step_value(
                    synthworld.prefix_is_clean(entry, t), sol.num_steps - t, P_MISTAKE
                )
                bound = 3.0 * math.sqrt(value * (1.0 - value) / 64)
                within += abs(soft[t - 1] - value) <= bound
                total += 1
        coverage = within / total
        assert coverage >= 0.99, f"3-sigma coverage {coverage:.4f} below 0.99"
    print(f"  step agreement {agreement:.4f}, 3-sigma coverage {coverage:.4f}")
    _report("C8 completion-sampling-comparison", 300.0, DURATIONS["c8"])


def test_c09_cost_ledger():
    with _timed("c9"):
        config = synthworld.WorldConfig(
            seed=909, questions=300, solutions_per_question=2,
            steps_min=3, steps_max=6, question_tokens=30, step_tokens=28,
        )
        sset, _ = synthworld.gen_corpus(config)
        ledger = mcts.cost_compare(sset, samples_per_step=8, dataset="gsm8k-shaped")
        assert abs(ledger.avg_steps - 4.47) < 0.35  # shaped to the target profile
        assert abs(ledger.avg_tokens - 126.0) < 13.0
        ratio = ledger.mcts_tokens / ledger.autopsv_tokens
        assert ratio > 10.0, f"cost ratio {ratio:.2f} not above 10"
    print(f"  avg_steps {ledger.avg_steps:.2f}  avg_tokens {ledger.avg_tokens:.0f}  ratio {ratio:.1f}")
    _report("C9 cost-ledger", 60.0, DURATIONS["c9"])


def test_c10_end_to_end_determinism(tmp_path):
    with _timed("c10"):
        def run(*args):
            result = subprocess.run(
                [sys.executable, "-m", "stepverify.cli", *map(str, args)],
                capture_output=True, text=True,
            )
            assert result.returncode == 0, result.stderr
            return result

        def pipeline(root: Path) -> dict[str, bytes]:
            root.mkdir()
            solutions = root / "solutions.jsonl"
            truth = root / "truth.jsonl"
            run("synth", "--seed", 33, "--questions", 30, "--solutions", 5,
                "--steps-min", 2, "--steps-max", 5, "--error-model", "stepwise",
                "--out", solutions, "--truth-out", truth)
            outcomes = root / "outcomes.jsonl"
            run("outcome-label", "--solutions", solutions, "--out", outcomes)
            osv = root / "osv.json"
            run("train-osv", "--solutions", solutions, "--outcome-labels", outcomes,
                "--epochs", 2, "--seed", 3, "--out", osv)
            traces = root / "traces.jsonl"
            run("score", "--solutions", solutions, "--scorer", "builtin",
                "--model", osv, "--out", traces)
            labels = root / "labels.jsonl"
            run("annotate", "--traces", traces, "--threshold", "-0.5", "--out", labels)
            psv = root / "psv.json"
            run("train-psv", "--solutions", solutions, "--process-labels", labels,
                "--epochs", 2, "--seed", 4, "--out", psv)
            psv_traces = root / "psv_traces.jsonl"
            run("score", "--solutions", solutions, "--scorer", "builtin",
                "--model", psv, "--out", psv_traces)
            report = root / "selection.jsonl"
            run("select", "--solutions", solutions, "--outcome-labels", outcomes,
                "--traces", f"OSV={traces}", "--traces", f"OSV+PSV={psv_traces}",
                "--k", 3, "--repeats", 3, "--seed", 5, "--out", report)
            sweep = root / "sweep.jsonl"
            run("calcbench", "--solutions", solutions, "--traces", traces, "--out", sweep)
            # config snapshots record the run's resolved paths, which differ
            # between the two roots by construction; every data artifact
            # (stores, models, reports) must match byte for byte
            return {
                path.name: path.read_bytes()
                for path in sorted(root.iterdir())
                if path.suffix in (".jsonl", ".json") and not path.name.endswith(".config.json")
            }

        first = pipeline(tmp_path / "one")
        second = pipeline(tmp_path / "two")
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], f"output {name} differs between runs"
    _report("C10 end-to-end-determinism", 300.0, DURATIONS["c10"])
