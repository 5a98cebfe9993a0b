"""Command-line pipeline driver.

Subcommands: synth, outcome-label, train-osv, score, annotate, mcts-annotate,
train-psv, calcbench, select, cost, report, bridge-check. Every run writes its
outputs atomically and drops a resolved-config snapshot next to the primary
output, so a finished run can be reproduced from the snapshot alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend/protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__, annotate, calcbench, corpus, jsonl, mcts, scorer, selection, synthworld, verifier
from .errors import BackendError, DataError, PipelineError, UsageError
from .seeds import derive_seed


def _snapshot(out_path: str, subcommand: str, args: argparse.Namespace) -> None:
    resolved = {
        key: value
        for key, value in sorted(vars(args).items())
        if key != "func" and not key.startswith("_")
    }
    doc = {"tool": "stepverify", "version": __version__, "subcommand": subcommand, "args": resolved}
    jsonl.write_text(Path(out_path).with_suffix(Path(out_path).suffix + ".config.json"),
                     json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _parse_thresholds(text: str) -> list[float]:
    try:
        thresholds = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"bad threshold list {text!r}: {exc}") from exc
    if not thresholds:
        raise UsageError("empty threshold list")
    for theta in thresholds:
        if not theta < 0:
            raise UsageError("threshold must be negative")
    return thresholds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args: argparse.Namespace) -> int:
    config = synthworld.WorldConfig(
        seed=args.seed,
        questions=args.questions,
        solutions_per_question=args.solutions,
        steps_min=args.steps_min,
        steps_max=args.steps_max,
        value_min=args.value_min,
        value_max=args.value_max,
        p_error=args.p_error,
        p_mistake=args.p_mistake,
        error_model=args.error_model,
        question_tokens=args.question_tokens,
        step_tokens=args.step_tokens,
    )
    sset, truth = synthworld.gen_corpus(config)
    if args.unlabeled:
        for qid, group in sset.groups.items():
            sset.groups[qid] = [
                corpus.Solution(
                    id=sol.id, question_id=sol.question_id, question=sol.question,
                    steps=sol.steps, final_answer=sol.final_answer, gold_answer=None,
                )
                for sol in group
            ]
    corpus.write_corpus(args.out, sset)
    synthworld.write_truth(args.truth_out, truth)
    _snapshot(args.out, "synth", args)
    print(f"synth: wrote {len(sset)} solutions over {sset.num_questions} questions to {args.out}")
    return 0


def _cmd_outcome_label(args: argparse.Namespace) -> int:
    sset = corpus.parse_corpus(args.solutions)
    labels = corpus.label_set(sset)
    corpus.write_outcome_store(args.out, labels)
    _snapshot(args.out, "outcome-label", args)
    positives = sum(labels.values())
    print(f"outcome-label: {positives}/{len(labels)} solutions labeled correct -> {args.out}")
    return 0


def _load_outcomes(args: argparse.Namespace, sset: corpus.SolutionSet) -> dict[str, int]:
    if getattr(args, "outcome_labels", None):
        return corpus.read_outcome_store(args.outcome_labels)
    return corpus.label_set(sset)


def _train_common(args: argparse.Namespace, mode: str) -> int:
    sset = corpus.parse_corpus(args.solutions)
    config = verifier.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        loss_mode=mode,
    )
    spec = verifier.FeatureSpec(dim=args.dim, max_steps=args.max_steps)
    if mode == "outcome":
        model = verifier.train(sset, config, outcome_targets=_load_outcomes(args, sset), spec=spec)
    else:
        stores = annotate.read_label_store(args.process_labels)
        targets = {sid: list(entry.labels) for sid, entry in stores.items()}
        model = verifier.train(sset, config, process_targets=targets, spec=spec)
    model.save(args.out)
    _snapshot(args.out, f"train-{'osv' if mode == 'outcome' else 'psv'}", args)
    print(f"train: saved {mode}-supervised model to {args.out}")
    return 0


def _cmd_train_osv(args: argparse.Namespace) -> int:
    return _train_common(args, "outcome")


def _cmd_train_psv(args: argparse.Namespace) -> int:
    return _train_common(args, "process")


def _scorer_spec(args: argparse.Namespace) -> scorer.ScorerSpec:
    return scorer.ScorerSpec(
        kind=args.scorer,
        model_path=args.model,
        trace_path=args.replay,
        truth_path=args.truth,
        p_mistake=args.p_mistake,
        noise_sigma=args.noise_sigma,
        noise_seed=args.noise_seed,
        command=args.cmd,
    )


def _cmd_score(args: argparse.Namespace) -> int:
    sset = corpus.parse_corpus(args.solutions)
    backend = scorer.make_scorer(_scorer_spec(args))
    try:
        traces = scorer.score_set(backend, sset, workers=args.workers, fail_fast=not args.keep_going)
    finally:
        backend.close()
    scorer.write_trace_store(args.out, traces)
    _snapshot(args.out, "score", args)
    clamped = sum(trace.clamp_count for trace in traces.values())
    print(f"score: wrote {len(traces)} traces ({clamped} clamped scores) to {args.out}")
    return 0


def _cmd_annotate(args: argparse.Namespace) -> int:
    if not args.threshold < 0:
        raise UsageError("threshold must be negative")
    traces = scorer.read_trace_store(args.traces)
    labels = {
        sid: annotate.label_process(trace, args.threshold) for sid, trace in traces.items()
    }
    annotate.write_label_store(args.out, labels)
    _snapshot(args.out, "annotate", args)
    flagged = sum(1 for entry in labels.values() if entry.first_error is not None)
    print(f"annotate: {flagged}/{len(labels)} solutions flagged -> {args.out}")
    return 0


def _cmd_mcts_annotate(args: argparse.Namespace) -> int:
    sset = corpus.parse_corpus(args.solutions)
    if args.cmd:
        sampler: mcts.CompletionSampler = mcts.ExecSampler(args.cmd)
    else:
        sampler = mcts.SynthWorldSampler(p_mistake=args.p_mistake, run_seed=args.seed)
    try:
        labels = mcts.label_set_mcts(sset, sampler, n=args.samples, hard_rule=args.rule)
    finally:
        sampler.close()
    annotate.write_label_store(args.out, labels)
    _snapshot(args.out, "mcts-annotate", args)
    print(f"mcts-annotate: labeled {len(labels)} solutions (N={args.samples}) -> {args.out}")
    return 0


def _cmd_calcbench(args: argparse.Namespace) -> int:
    sset = corpus.parse_corpus(args.solutions)
    truth = calcbench.ground_truth(sset)
    traces = scorer.read_trace_store(args.traces)
    deltas = annotate.delta_store(traces)
    thresholds = _parse_thresholds(args.thresholds)
    metric = calcbench.detection_metrics_steps if args.level == "step" else calcbench.detection_metrics
    reports = [metric(truth, deltas, theta) for theta in thresholds]
    jsonl.write_records(args.out, (report.record() for report in reports))
    _snapshot(args.out, "calcbench", args)
    print(f"calcbench: swept {len(reports)} thresholds ({args.level}-level) -> {args.out}")
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    sset = corpus.parse_corpus(args.solutions)
    outcome = _load_outcomes(args, sset)
    stores: dict[str, dict[str, scorer.ConfidenceTrace]] = {}
    for item in args.traces:
        if "=" not in item:
            raise UsageError(f"--traces expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        stores[name] = scorer.read_trace_store(path)
    report = selection.evaluate(
        sset, stores, outcome, k=args.k, repeats=args.repeats, seed=args.seed
    )
    jsonl.write_records(args.out, [report.record(dataset=args.dataset)])
    _snapshot(args.out, "select", args)
    print(
        f"select: k={report.k} n={report.n} pass@1={report.pass_1:.4f} "
        f"pass@{report.k}={report.pass_k:.4f} sc={report.self_consistency_acc.mean:.4f} -> {args.out}"
    )
    return 0


def _cmd_cost(args: argparse.Namespace) -> int:
    sset = corpus.parse_corpus(args.solutions)
    ledger = mcts.cost_compare(
        sset, samples_per_step=args.samples, counter=args.counter, dataset=args.dataset
    )
    jsonl.write_records(args.out, [ledger.record()])
    _snapshot(args.out, "cost", args)
    ratio = ledger.mcts_tokens / ledger.autopsv_tokens if ledger.autopsv_tokens else float("nan")
    print(f"cost: mcts/autopsv token ratio {ratio:.2f} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def _sniff_kind(record: dict[str, Any]) -> str:
    if "theta" in record:
        return "sweep"
    if "mcts_cost" in record:
        return "cost"
    if "pass_k" in record or "verifiers" in record:
        return "selection"
    raise DataError(f"cannot infer report kind from record fields: {sorted(record)}")


def _format_table(headers: list[str], rows: list[list[str]], fmt: str) -> str:
    if fmt == "tsv":
        lines = ["\t".join(headers)] + ["\t".join(row) for row in rows]
        return "\n".join(lines)
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def _line(cells: list[str]) -> str:
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(cells)).rstrip()
    return "\n".join([_line(headers)] + [_line(row) for row in rows])


def render_report(records: list[dict[str, Any]], fmt: str = "text") -> str:
    """Render a record stream as a table; all records must share one kind."""
    if not records:
        return _format_table(["(empty)"], [], fmt)
    kinds = {_sniff_kind(record) for record in records}
    if len(kinds) != 1:
        raise DataError(f"mixed record kinds in report input: {sorted(kinds)}")
    kind = kinds.pop()
    if kind == "sweep":
        # grid shaped like the detection sweep: metric rows, |theta| columns
        headers = ["Metric"] + [f"{abs(record['theta']):g}" for record in records]
        rows = [
            ["Prec."] + [f"{record['precision']:.4f}" for record in records],
            ["Recall"] + [f"{record['recall']:.4f}" for record in records],
            ["F1-Score"] + [f"{record['f1']:.4f}" for record in records],
        ]
        return _format_table(headers, rows, fmt)
    if kind == "cost":
        headers = ["Dataset", "Questions", "Steps(Avg)", "Tokens(Avg)", "MCTS", "AutoPSV"]
        rows = [
            [
                str(record["dataset"]),
                str(record["questions"]),
                f"{record['avg_steps']:.2f}",
                f"{record['avg_tokens']:.0f}",
                str(record["mcts_cost"]),
                str(record["autopsv_cost"]),
            ]
            for record in records
        ]
        return _format_table(headers, rows, fmt)
    # selection: one row per record, one column per verifier/aggregation pair
    verifier_cols: list[tuple[str, str]] = []
    for record in records:
        for name in record.get("verifiers", {}):
            for method in record["verifiers"][name]:
                if (name, method) not in verifier_cols:
                    verifier_cols.append((name, method))
    headers = ["Dataset", "Pass@1", "Pass@k", "SC"] + [f"{n}({m})" for n, m in verifier_cols]
    rows = []
    for record in records:
        row = [
            str(record.get("dataset", "-")),
            f"{record['pass_1']:.4f}",
            f"{record['pass_k']:.4f}",
            f"{record['self_consistency']:.4f}",
        ]
        for name, method in verifier_cols:
            cell = record.get("verifiers", {}).get(name, {}).get(method)
            row.append(f"{cell['acc']:.4f}" if cell else "-")
        rows.append(row)
    return _format_table(headers, rows, fmt)


def _cmd_report(args: argparse.Namespace) -> int:
    records = [record for _, record in jsonl.read_records(args.input)]
    print(render_report(records, fmt=args.format))
    return 0


def _cmd_bridge_check(args: argparse.Namespace) -> int:
    rng_seed = args.seed
    questions = []
    for i in range(args.requests):
        seed = derive_seed(rng_seed, "bridge-check", i)
        num_steps = 1 + seed % 6
        questions.append(
            corpus.Solution(
                id=f"chk-{i:05d}",
                question_id=f"chkq-{i:05d}",
                question=f"check question {i} token{seed % 97}",
                steps=tuple(f"step {t} payload {(seed >> (4 * t)) % 997}" for t in range(1, num_steps + 1)),
                final_answer="0",
            )
        )
    backend = scorer.ExecScorer(args.cmd)
    try:
        first = backend.raw_scores_many(questions)
        for sol in questions:
            if len(first[sol.id]) != sol.num_steps:
                raise BackendError(f"length mismatch for {sol.id!r}")
        # resend a sample under fresh rids; a conforming scorer is deterministic
        sample = questions[:: max(1, len(questions) // 16)]
        resent = [
            corpus.Solution(
                id=f"dup-{sol.id}", question_id=sol.question_id, question=sol.question,
                steps=sol.steps, final_answer=sol.final_answer,
            )
            for sol in sample
        ]
        second = backend.raw_scores_many(resent)
        for sol in sample:
            if second[f"dup-{sol.id}"] != first[sol.id]:
                raise BackendError(f"nondeterministic scores for repeated request {sol.id!r}")
    finally:
        backend.close()
    print(
        f"bridge-check: {args.requests} requests ok, {len(sample)} determinism resends ok "
        f"({args.cmd!r})"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.1, help="SGD learning rate")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=1024, help="hashed feature dimension")
    p.add_argument("--max-steps", type=int, default=8, help="position normalizer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepverify", description=__doc__)
    parser.add_argument("--version", action="version", version=f"stepverify {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus plus truth sidecar")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--questions", type=int, default=100)
    p.add_argument("--solutions", type=int, default=5)
    p.add_argument("--steps-min", type=int, default=3)
    p.add_argument("--steps-max", type=int, default=8)
    p.add_argument("--value-min", type=int, default=2)
    p.add_argument("--value-max", type=int, default=9)
    p.add_argument("--p-error", type=float, default=0.5)
    p.add_argument("--p-mistake", type=float, default=0.2)
    p.add_argument("--error-model", choices=["uniform", "stepwise"], default="uniform")
    p.add_argument("--question-tokens", type=int, default=0)
    p.add_argument("--step-tokens", type=int, default=0)
    p.add_argument("--unlabeled", action="store_true", help="omit gold answers from the corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("outcome-label", help="derive outcome labels from gold answers")
    p.add_argument("--solutions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_outcome_label)

    p = sub.add_parser("train-osv", help="train the outcome-supervised verifier")
    p.add_argument("--solutions", required=True)
    p.add_argument("--outcome-labels", help="outcome store; derived from gold answers if omitted")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_osv)

    p = sub.add_parser("train-psv", help="train the process-supervised verifier")
    p.add_argument("--solutions", required=True)
    p.add_argument("--process-labels", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_psv)

    p = sub.add_parser("score", help="produce confidence traces with a backend")
    p.add_argument("--solutions", required=True)
    p.add_argument("--scorer", choices=["builtin", "oracle", "replay", "exec"], required=True)
    p.add_argument("--model", help="model file (builtin)")
    p.add_argument("--truth", help="truth sidecar (oracle)")
    p.add_argument("--p-mistake", type=float, default=0.2, help="oracle completion mistake rate")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="oracle multiplicative noise")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--replay", help="trace store to replay")
    p.add_argument("--cmd", help="external scorer command (exec)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--keep-going", action="store_true", help="collect failures instead of failing fast")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("annotate", help="emit process labels from confidence changes")
    p.add_argument("--traces", required=True)
    p.add_argument("--threshold", type=float, default=annotate.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("mcts-annotate", help="emit process labels from completion sampling")
    p.add_argument("--solutions", required=True)
    p.add_argument("--samples", type=int, default=mcts.DEFAULT_SAMPLES_PER_STEP)
    p.add_argument("--rule", choices=[mcts.RULE_ANY_POSITIVE, mcts.RULE_MAJORITY],
                   default=mcts.RULE_ANY_POSITIVE)
    p.add_argument("--p-mistake", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cmd", help="external completion sampler command")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mcts_annotate)

    p = sub.add_parser("calcbench", help="calculation-error detection benchmark sweep")
    p.add_argument("--solutions", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--thresholds", default="-0.5,-0.6,-0.7,-0.8,-0.9")
    p.add_argument("--level", choices=["sample", "step"], default="sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calcbench)

    p = sub.add_parser("select", help="best-of-k evaluation against trace stores")
    p.add_argument("--solutions", required=True)
    p.add_argument("--outcome-labels")
    p.add_argument("--traces", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("cost", help="annotation-cost ledger for both labeling strategies")
    p.add_argument("--solutions", required=True)
    p.add_argument("--samples", type=int, default=mcts.DEFAULT_SAMPLES_PER_STEP)
    p.add_argument("--counter", choices=["whitespace", "chars4"], default="whitespace")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("report", help="render a record stream as a table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["text", "tsv"], default="text")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("bridge-check", help="conformance-check an external scorer")
    p.add_argument("--cmd", required=True)
    p.add_argument("--requests", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bridge_check)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; we reserve 2 for data errors
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BrokenPipeError:
        return 3


if __name__ == "__main__":
    sys.exit(main())
