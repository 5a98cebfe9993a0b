from __future__ import annotations

import json
import sys
import textwrap

import pytest

from stepverify import corpus, scorer, synthworld, verifier
from stepverify.corpus import Solution, SolutionSet
from stepverify.errors import BackendError, DataError
from stepverify.scorer import (
    EPSILON,
    BuiltinScorer,
    ConfidenceTrace,
    ExecScorer,
    OracleScorer,
    ReplayScorer,
    ScorerSpec,
    clamp_scores,
    read_trace_store,
    score_set,
    score_solution,
    write_trace_store,
)


def _world_solution(error_step=None, m=3, p_mistake=0.2):
    config = synthworld.WorldConfig(seed=5, questions=1, solutions_per_question=1,
                                    steps_min=m, steps_max=m, p_error=0.0)
    sset, truth = synthworld.gen_corpus(config)
    sol = next(sset.solutions())
    entry = synthworld.SolutionTruth(sol.id, error_step, tuple(
        1 if (error_step is None or t < error_step) else 0 for t in range(1, m + 1)))
    return sol, entry


class TestClamping:
    def test_identity_inside_range(self):
        values = [EPSILON, 0.5, 1.0 - EPSILON]
        clamped, count = clamp_scores(values)
        assert list(clamped) == values and count == 0

    def test_clamps_and_counts(self):
        clamped, count = clamp_scores([0.0, 0.5, 1.0])
        assert clamped == (EPSILON, 0.5, 1.0 - EPSILON)
        assert count == 2

    def test_trace_invariant_enforced(self):
        with pytest.raises(DataError):
            ConfidenceTrace("s", (0.0, 0.5), "x")
        with pytest.raises(DataError):
            ConfidenceTrace("s", (), "x")


class TestOracleBackend:
    def test_clean_closed_form(self):
        sol, entry = _world_solution(error_step=None, m=3)
        trace = score_solution(OracleScorer({sol.id: entry}, p_mistake=0.2), sol)
        assert trace.scores[0] == pytest.approx(0.64, abs=1e-12)
        assert trace.scores[1] == pytest.approx(0.8, abs=1e-12)
        assert trace.scores[2] == pytest.approx(1.0, abs=1e-5)  # clamped below 1
        assert trace.clamp_count == 1

    def test_corrupted_floors_to_epsilon(self):
        sol, entry = _world_solution(error_step=2, m=3)
        trace = score_solution(OracleScorer({sol.id: entry}, p_mistake=0.2), sol)
        assert trace.scores[1] == EPSILON and trace.scores[2] == EPSILON
        assert trace.scores[0] > 0.5

    def test_noise_is_solution_seeded(self):
        sol, entry = _world_solution(error_step=None, m=3)
        s1 = OracleScorer({sol.id: entry}, 0.2, noise_sigma=0.15, noise_seed=7)
        s2 = OracleScorer({sol.id: entry}, 0.2, noise_sigma=0.15, noise_seed=7)
        assert score_solution(s1, sol) == score_solution(s2, sol)
        s3 = OracleScorer({sol.id: entry}, 0.2, noise_sigma=0.15, noise_seed=8)
        assert score_solution(s3, sol) != score_solution(s1, sol)

    def test_missing_truth_errors(self):
        sol, _ = _world_solution()
        with pytest.raises(BackendError, match="truth sidecar missing"):
            score_solution(OracleScorer({}, 0.2), sol)


class TestReplayBackend:
    def test_replay_clamps_and_counts(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        path.write_text(json.dumps({"solution_id": "s", "scores": [0.0, 0.5], "backend": "x"}) + "\n")
        sol = Solution(id="s", question_id="q", question="?", steps=("a", "b"), final_answer="1")
        trace = score_solution(scorer.make_scorer(ScorerSpec(kind="replay", trace_path=str(path))), sol)
        assert trace.scores == (EPSILON, 0.5)
        assert trace.clamp_count == 1

    def test_missing_id_errors(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        path.write_text("")
        sol = Solution(id="s", question_id="q", question="?", steps=("a",), final_answer="1")
        with pytest.raises(BackendError, match="replay store missing"):
            score_solution(scorer.make_scorer(ScorerSpec(kind="replay", trace_path=str(path))), sol)

    def test_wrong_length_checked(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        path.write_text(json.dumps({"solution_id": "s", "scores": [0.5], "backend": "x"}) + "\n")
        sol = Solution(id="s", question_id="q", question="?", steps=("a", "b"), final_answer="1")
        with pytest.raises(BackendError, match="1 scores"):
            score_solution(scorer.make_scorer(ScorerSpec(kind="replay", trace_path=str(path))), sol)


class TestBuiltinBackend:
    def test_matches_predict_per_prefix(self, small_world, small_world_outcomes):
        _, sset, _ = small_world
        model = verifier.train(sset, verifier.TrainConfig(epochs=1, seed=1),
                               outcome_targets=small_world_outcomes)
        backend = BuiltinScorer(model)
        sol = next(sset.solutions())
        trace = score_solution(backend, sol)
        direct, _ = clamp_scores(verifier.predict_solution(model, sol))
        assert trace.scores == direct


class TestScoreSet:
    def test_empty_set(self):
        traces = score_set(OracleScorer({}, 0.2), SolutionSet())
        assert traces == {}

    def test_workers_do_not_change_bytes(self, tmp_path, small_world):
        _, sset, truth = small_world
        backend = OracleScorer(truth, 0.2)
        t1 = score_set(backend, sset, workers=1)
        t4 = score_set(backend, sset, workers=4)
        p1, p4 = tmp_path / "w1.jsonl", tmp_path / "w4.jsonl"
        write_trace_store(p1, t1)
        write_trace_store(p4, t4)
        assert p1.read_bytes() == p4.read_bytes()

    def test_oracle_matches_closed_form_everywhere(self, small_world):
        config, sset, truth = small_world
        traces = score_set(OracleScorer(truth, config.p_mistake), sset)
        for sol in sset.solutions():
            expected, _ = clamp_scores(
                synthworld.oracle_scores(truth[sol.id], sol.num_steps, config.p_mistake)
            )
            assert traces[sol.id].scores == expected

    def test_fail_fast_and_collected_failures(self, small_world):
        _, sset, truth = small_world
        some_id = next(sset.solutions()).id
        partial = {sid: entry for sid, entry in truth.items() if sid != some_id}
        with pytest.raises(BackendError, match=some_id):
            score_set(OracleScorer(partial, 0.2), sset)
        with pytest.raises(BackendError, match="1 solutions"):
            score_set(OracleScorer(partial, 0.2), sset, fail_fast=False)

    def test_store_round_trip(self, tmp_path, small_world):
        _, sset, truth = small_world
        traces = score_set(OracleScorer(truth, 0.2), sset)
        path = tmp_path / "t.jsonl"
        write_trace_store(path, traces)
        again = read_trace_store(path)
        assert set(again) == set(traces)
        for sid in traces:
            assert again[sid].scores == traces[sid].scores


STUB_OK = """
import json, sys
pending = []
for line in sys.stdin:
    req = json.loads(line)
    pending.append(req)
    if len(pending) == 2:  # respond out of order in pairs
        for r in reversed(pending):
            print(json.dumps({"rid": r["rid"], "scores": [0.5] * len(r["steps"])}), flush=True)
        pending = []
for r in reversed(pending):
    print(json.dumps({"rid": r["rid"], "scores": [0.5] * len(r["steps"])}), flush=True)
"""

STUB_BAD_LENGTH = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"rid": req["rid"], "scores": [0.5] * (len(req["steps"]) + 1)}), flush=True)
"""

STUB_GARBAGE = """
import sys
for line in sys.stdin:
    print("not json", flush=True)
"""

STUB_DIES = """
import sys
sys.exit(3)
"""


def _stub_cmd(tmp_path, body, name):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return f"{sys.executable} {path}"


class TestExecBackend:
    def _sset(self, count=6):
        # even count: the out-of-order stub flushes in pairs
        sset = SolutionSet()
        for i in range(count):
            sol = Solution(id=f"s{i}", question_id=f"q{i}", question="?",
                           steps=tuple(f"step {t}" for t in range(1 + i % 3)) or ("step",),
                           final_answer="0")
            sset.groups[sol.question_id] = [sol]
        return sset

    def test_out_of_order_responses_correlate(self, tmp_path):
        backend = ExecScorer(_stub_cmd(tmp_path, STUB_OK, "ok.py"))
        try:
            traces = score_set(backend, self._sset())
        finally:
            backend.close()
        assert len(traces) == 6
        for sid, trace in traces.items():
            assert all(s == 0.5 for s in trace.scores)

    def test_length_violation_aborts(self, tmp_path):
        backend = ExecScorer(_stub_cmd(tmp_path, STUB_BAD_LENGTH, "len.py"))
        with pytest.raises(BackendError, match="scores for"):
            score_set(backend, self._sset())
        backend.close()

    def test_garbage_line_aborts_with_offender(self, tmp_path):
        backend = ExecScorer(_stub_cmd(tmp_path, STUB_GARBAGE, "bad.py"))
        with pytest.raises(BackendError, match="not json"):
            score_set(backend, self._sset())
        backend.close()

    def test_early_exit_reports(self, tmp_path):
        backend = ExecScorer(_stub_cmd(tmp_path, STUB_DIES, "die.py"))
        with pytest.raises(BackendError, match="exited"):
            score_set(backend, self._sset())
        backend.close()
