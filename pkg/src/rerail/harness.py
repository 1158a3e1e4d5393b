"""Dataset-scale orchestration and reporting.

Runs one of four modes per question (single chain-of-thought, self-
consistency voting, multi-agent debate, or the full derail-and-repair
pipeline), grades the answers, and emits:

* outcomes.jsonl — one graded record per question (the persistence layer;
  a re-run over the same directory replays these instead of re-executing)
* trace/<question_id>.json — the per-question audit trail
* report.json — accuracy, confusion matrix, usage, and cost projections,
  a pure function of the outcomes plus the config snapshot
* accuracy_by_category.csv, confusion_matrix.csv, cost.csv
"""

from __future__ import annotations

import csv
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import RunSettings, question_seed
from .derailment import (
    Consistent,
    Derailed,
    FLAG_UNNORMALIZABLE,
    _answer_bucket,
    generate_rps,
    route,
)
from .gateway import (
    CallContext,
    CompletionParams,
    Gateway,
    LiveBackend,
    PromptCapture,
    ScriptedBackend,
    StageUsage,
    StructuredOutputFailure,
    complete_structured,
)
from .grading import grade_safe
from .parsing import ANSWER_MARKER_RE, parse_reasoning_path
from .prompts import (
    TEMPLATE_MAD_INITIAL,
    TEMPLATE_MAD_REVISION,
    TEMPLATE_RAW_COT,
    format_question,
    render_prompt,
)
from .rerailer import rerail
from .types import (
    ParseFailure,
    Question,
    RerailError,
    STAGE_COT,
    STAGE_MAD,
)

MODE_COT = "cot"
MODE_SC = "sc"
MODE_MAD = "mad"
MODE_RERAILER = "rerailer"

CELL_TP = "TP"
CELL_TN = "TN"
CELL_FN = "FN"
CELL_FP = "FP"
CELLS = (CELL_TP, CELL_TN, CELL_FN, CELL_FP)

FLAG_SC_TIE = "sc-tie"
FLAG_MAD_TIE = "mad-tie"
FLAG_MAD_FAIL_OPEN = "mad-parse-fail-open"
FLAG_COT_UNPARSEABLE = "cot-unparseable"

OUTCOMES_FILE = "outcomes.jsonl"
REPORT_FILE = "report.json"
CONFIG_FILE = "resolved_config.json"
TRACE_DIR = "trace"


class MissingPrice(RerailError):
    """The price table has no entry for the model."""


class IncompleteTrace(RerailError):
    """A replay directory lacks outcomes or the config snapshot."""


def cell_for(correct_baseline: bool, correct_final: bool) -> str:
    """Joint correctness of the pre-repair answer versus the final answer."""
    if correct_baseline and correct_final:
        return CELL_TP
    if not correct_baseline and correct_final:
        return CELL_TN
    if not correct_baseline and not correct_final:
        return CELL_FN
    return CELL_FP


@dataclass
class QuestionOutcome:
    question_id: str
    category: str
    routing: Optional[str] = None  # "consistent" | "derailed" | None for baselines
    baseline_answer: Optional[str] = None
    final_answer: Optional[str] = None
    correct_baseline: Optional[bool] = None
    correct_final: Optional[bool] = None
    cell: Optional[str] = None
    flags: list[str] = field(default_factory=list)
    usage: dict[str, dict] = field(default_factory=dict)
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "category": self.category,
            "routing": self.routing,
            "baseline_answer": self.baseline_answer,
            "final_answer": self.final_answer,
            "correct_baseline": self.correct_baseline,
            "correct_final": self.correct_final,
            "cell": self.cell,
            "flags": self.flags,
            "usage": self.usage,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "QuestionOutcome":
        return cls(**payload)


@dataclass(frozen=True)
class ModeResult:
    """What a mode runner produces for one question, before grading."""

    baseline_raw: Optional[str]
    final_raw: Optional[str]
    routing: Optional[str]
    flags: tuple[str, ...]
    trace: dict


def _extract_answer(text: str) -> Optional[str]:
    """Final answer of a generation; tolerates missing step structure."""
    try:
        return parse_reasoning_path(text).final_answer
    except ParseFailure:
        pass
    last = None
    for last in ANSWER_MARKER_RE.finditer(text):
        pass
    if last is not None and last.group(1).strip():
        return last.group(1).strip()
    return None


def run_cot(question: Question, gateway: Gateway, settings: RunSettings) -> ModeResult:
    """Single chain-of-thought completion at temperature 0. One call, ever."""
    prompt = render_prompt(
        TEMPLATE_RAW_COT,
        {
            "subject": question.subject,
            "question": format_question(question.text, question.context, question.options),
        },
    )
    params = CompletionParams(
        model_id=settings.model_id,
        temperature=settings.temperature,
        seed=question_seed(settings.seed, question.id),
    )
    result = gateway.complete(prompt, params, CallContext(STAGE_COT, question.id))
    answer = _extract_answer(result.text)
    flags = () if answer is not None else (FLAG_COT_UNPARSEABLE,)
    return ModeResult(answer, answer, None, flags, {"mode": MODE_COT})


def _modal_answer(
    raws: list[str], question: Question
) -> tuple[str, bool]:
    """Majority answer by normalized value; first-reached mode on ties.

    Returns (raw answer, tied)."""
    buckets = [_answer_bucket(raw, question) for raw in raws]
    counts: dict = {}
    for bucket in buckets:
        counts[bucket] = counts.get(bucket, 0) + 1
    best = max(counts.values())
    tied = sum(1 for c in counts.values() if c == best) > 1
    winner = next(b for b in buckets if counts[b] == best)
    raw = next(r for r, b in zip(raws, buckets) if b == winner)
    return raw, tied


def run_sc_baseline(question: Question, gateway: Gateway, settings: RunSettings) -> ModeResult:
    """Self-consistency: sample sc_budget paths, majority-vote the answer."""
    paths = generate_rps(question, gateway, settings, n=settings.sc_budget)
    answer, tied = _modal_answer([p.final_answer for p in paths], question)
    flags = (FLAG_SC_TIE,) if tied else ()
    trace = {
        "mode": MODE_SC,
        "answers": [p.final_answer for p in paths],
        "modal_answer": answer,
    }
    return ModeResult(answer, answer, None, flags, trace)


def _mad_structured(
    question: Question,
    gateway: Gateway,
    settings: RunSettings,
    template: str,
    variables: dict,
    agent_id: int,
    round_no: int,
) -> Optional[dict[str, str]]:
    prompt = render_prompt(template, variables)
    context = CallContext(
        stage=STAGE_MAD, question_id=question.id, agent_id=agent_id, round=round_no
    )
    params = CompletionParams(
        model_id=settings.model_id,
        temperature=settings.temperature,
        seed=question_seed(settings.seed, f"{question.id}:mad:{agent_id}:{round_no}"),
    )

    def validate(parsed: dict[str, str]) -> None:
        if not parsed.get("answer", "").strip():
            raise ValueError("missing answer")

    try:
        return complete_structured(gateway, prompt, params, context, validate=validate)
    except StructuredOutputFailure:
        return None


def run_mad_baseline(question: Question, gateway: Gateway, settings: RunSettings) -> ModeResult:
    """Debate baseline: independent answers, then revision rounds.

    Stops early when all agents agree; the final answer is the last-round
    majority, tie going to agent 1. A parse failure keeps that agent's
    previous answer (fail-open).
    """
    agents = settings.mad_agents
    question_slot = format_question(question.text, question.context, question.options)
    answers: list[Optional[str]] = [None] * agents
    flags: list[str] = []
    transcript: list[dict] = []

    def bucket(raw: Optional[str]):
        return ("missing",) if raw is None else _answer_bucket(raw, question)

    rounds_run = 0
    for round_no in range(1, settings.mad_rounds + 1):
        rounds_run = round_no
        if round_no == 1:
            variables_base = {"subject": question.subject, "question": question_slot}
            template = TEMPLATE_MAD_INITIAL
        else:
            prior = "\n".join(
                f"Agent {i + 1} answered: {answers[i]}"
                for i in range(agents)
                if answers[i] is not None
            ) or "No agent produced an answer yet."
            variables_base = {
                "subject": question.subject,
                "question": question_slot,
                "response": prior,
            }
            template = TEMPLATE_MAD_REVISION

        for agent_index in range(agents):
            parsed = _mad_structured(
                question, gateway, settings, template, variables_base, agent_index + 1, round_no
            )
            if parsed is None:
                flags.append(FLAG_MAD_FAIL_OPEN)
            else:
                answers[agent_index] = parsed["answer"]
            transcript.append(
                {"agent_id": agent_index + 1, "round": round_no, "answer": answers[agent_index]}
            )

        if len({bucket(a) for a in answers}) == 1 and answers[0] is not None:
            break

    present = [a for a in answers if a is not None]
    if not present:
        return ModeResult(None, None, None, tuple(flags), {"mode": MODE_MAD, "transcript": transcript})
    counts: dict = {}
    for raw in answers:
        if raw is not None:
            key = bucket(raw)
            counts[key] = counts.get(key, 0) + 1
    best = max(counts.values())
    winners = [key for key, count in counts.items() if count == best]
    if len(winners) > 1:
        flags.append(FLAG_MAD_TIE)
        final = answers[0] if answers[0] is not None else present[0]
    else:
        final = next(a for a in answers if a is not None and bucket(a) == winners[0])
    trace = {"mode": MODE_MAD, "transcript": transcript, "rounds_run": rounds_run}
    return ModeResult(final, final, None, tuple(flags), trace)


def run_rerailer_mode(question: Question, gateway: Gateway, settings: RunSettings) -> ModeResult:
    """Full pipeline: route on consistency, then repair derailed paths."""
    routed = route(question, gateway, settings)
    if isinstance(routed, Consistent):
        trace = {
            "mode": MODE_RERAILER,
            "routing": "consistent",
            "rule_fired": routed.verdict.rule_fired,
            "answers": list(routed.verdict.answers),
        }
        return ModeResult(
            routed.answer_raw, routed.answer_raw, "consistent", routed.flags, trace
        )

    assert isinstance(routed, Derailed)
    result = rerail(question, routed.selected, gateway, settings)
    flags = tuple(sorted(set(routed.flags) | set(result.flags)))
    trace = {
        "mode": MODE_RERAILER,
        "routing": "derailed",
        "rule_fired": routed.verdict.rule_fired,
        "answers": list(routed.verdict.answers),
        "selected_index": routed.selected_index,
        "judge_rationale": routed.judge_rationale,
        "iterations_run": result.iterations_run,
        "certified": result.certified,
        "rerail": result.trace,
    }
    return ModeResult(
        routed.selected.final_answer, result.path.final_answer, "derailed", flags, trace
    )


_MODE_RUNNERS = {
    MODE_COT: run_cot,
    MODE_SC: run_sc_baseline,
    MODE_MAD: run_mad_baseline,
    MODE_RERAILER: run_rerailer_mode,
}


def make_gateway(
    settings: RunSettings,
    backend_kind: str,
    script_path: Optional[str | Path] = None,
    out_dir: Optional[str | Path] = None,
    capture: Optional[PromptCapture] = None,
) -> Gateway:
    """Gateway wired for a run: scripted replays, live caches by default."""
    if backend_kind == "scripted":
        if script_path is None:
            raise ValueError("scripted backend requires a script file")
        backend = ScriptedBackend.from_file(script_path)
        cache_enabled = bool(settings.cache_enabled)
    elif backend_kind == "live":
        backend = LiveBackend(
            endpoint=settings.endpoint,
            api_key_env=settings.api_key_env,
            timeout_s=settings.timeout_s,
        )
        cache_enabled = settings.cache_enabled is not False
    else:
        raise ValueError(f"unknown backend {backend_kind!r}")

    cache_dir = Path(out_dir) / "cache" if (cache_enabled and out_dir is not None) else None
    return Gateway(
        backend,
        cache_dir=cache_dir,
        cache_enabled=cache_enabled and cache_dir is not None,
        max_in_flight=settings.max_in_flight,
        requests_per_minute=settings.requests_per_minute,
        capture=capture,
    )


def grade_outcome(question: Question, mode_result: ModeResult, settings: RunSettings) -> QuestionOutcome:
    """Grade a mode result into a persisted outcome record."""
    correct_baseline, base_flags = grade_safe(
        mode_result.baseline_raw,
        question.ground_truth,
        question.kind,
        settings.abs_tolerance,
        settings.rel_tolerance,
    )
    correct_final, final_flags = grade_safe(
        mode_result.final_raw,
        question.ground_truth,
        question.kind,
        settings.abs_tolerance,
        settings.rel_tolerance,
    )
    flags = sorted(set(mode_result.flags) | set(base_flags) | set(final_flags))
    cell = None
    if mode_result.routing == "derailed":
        cell = cell_for(correct_baseline, correct_final)
    return QuestionOutcome(
        question_id=question.id,
        category=question.category.value,
        routing=mode_result.routing,
        baseline_answer=mode_result.baseline_raw,
        final_answer=mode_result.final_raw,
        correct_baseline=correct_baseline,
        correct_final=correct_final,
        cell=cell,
        flags=flags,
    )


def run_question(
    question: Question, mode: str, gateway: Gateway, settings: RunSettings
) -> tuple[QuestionOutcome, dict]:
    """Execute one question; failures become recorded outcomes, not aborts."""
    runner = _MODE_RUNNERS[mode]
    try:
        mode_result = runner(question, gateway, settings)
        outcome = grade_outcome(question, mode_result, settings)
        trace = mode_result.trace
    except Exception as exc:  # recorded per question; the run continues
        outcome = QuestionOutcome(
            question_id=question.id,
            category=question.category.value,
            flags=["question-failed"],
            error=f"{type(exc).__name__}: {exc}",
        )
        trace = {"mode": mode, "error": outcome.error}
    outcome.usage = {
        stage: usage.to_json()
        for stage, usage in sorted(gateway.ledger.question_usage(question.id).items())
    }
    return outcome, trace


def _accuracy_block(outcomes: list[QuestionOutcome]) -> dict:
    graded = [o for o in outcomes if o.error is None]
    correct = sum(1 for o in graded if o.correct_final)
    total = len(graded)
    return {
        "correct": correct,
        "total": total,
        "accuracy": (correct / total) if total else None,
    }


def confusion_matrix(outcomes: list[QuestionOutcome]) -> dict:
    """Cell counts overall and per category, over derailed questions only."""
    def count(rows: list[QuestionOutcome]) -> dict:
        cells = {cell: 0 for cell in CELLS}
        for row in rows:
            if row.cell is not None:
                cells[row.cell] += 1
        return cells

    categories = sorted({o.category for o in outcomes})
    return {
        "overall": count(outcomes),
        "by_category": {cat: count([o for o in outcomes if o.category == cat]) for cat in categories},
    }


def usage_totals(outcomes: list[QuestionOutcome]) -> dict:
    """Aggregate per-stage usage across outcomes (pure, from persisted rows)."""
    by_stage: dict[str, StageUsage] = {}
    for outcome in outcomes:
        for stage, payload in outcome.usage.items():
            row = by_stage.setdefault(stage, StageUsage())
            row.merge(StageUsage.from_json(payload))
    total = StageUsage()
    for row in by_stage.values():
        total.merge(row)
    payload = total.to_json()
    payload["by_stage"] = {stage: row.to_json() for stage, row in sorted(by_stage.items())}
    return payload


def cost_report(usage: dict, price_table: dict, model_id: str, n_questions: int) -> dict:
    """Dollar and wall-time projections per 1000 questions.

    ``price_table`` maps model id to {"prompt_per_1k": $, "completion_per_1k": $}.
    Billing covers live calls only; cached replays are free. Raises
    MissingPrice when the model has no price entry.
    """
    if model_id not in price_table:
        raise MissingPrice(f"no price entry for model {model_id!r}")
    price = price_table[model_id]
    cost = (
        usage["billed_prompt_tokens"] / 1000.0 * float(price["prompt_per_1k"])
        + usage["billed_completion_tokens"] / 1000.0 * float(price["completion_per_1k"])
    )
    scale = (1000.0 / n_questions) if n_questions else 0.0
    wall_s = usage["wall_time_s"]
    return {
        "model_id": model_id,
        "n_questions": n_questions,
        "cost_usd": cost,
        "cost_per_1000_usd": round(cost * scale, 1),
        "wall_time_s": wall_s,
        "hours_per_1000": round(wall_s * scale / 3600.0, 1),
    }


def build_report(outcomes: list[QuestionOutcome], config_snapshot: dict, mode: str) -> dict:
    """The full run report. Pure: same outcomes + config -> same bytes."""
    ordered = sorted(outcomes, key=lambda o: o.question_id)
    failed = [o for o in ordered if o.error is not None]
    graded = [o for o in ordered if o.error is None]

    counts: dict = {"total": len(ordered), "failed": len(failed)}
    if mode == MODE_RERAILER:
        counts["consistent"] = sum(1 for o in graded if o.routing == "consistent")
        counts["derailed"] = sum(1 for o in graded if o.routing == "derailed")
    else:
        counts["consistent"] = None
        counts["derailed"] = None

    categories = sorted({o.category for o in ordered})
    accuracy = {
        "overall": _accuracy_block(ordered),
        "by_category": {cat: _accuracy_block([o for o in ordered if o.category == cat]) for cat in categories},
    }
    if mode == MODE_RERAILER:
        consistent_rows = [o for o in graded if o.routing == "consistent"]
        derailed_rows = [o for o in graded if o.routing == "derailed"]
        derailed_baseline_correct = sum(1 for o in derailed_rows if o.correct_baseline)
        accuracy["split"] = {
            "consistent_route": _accuracy_block(consistent_rows),
            "derailed_route": _accuracy_block(derailed_rows),
            "derailed_before_repair": {
                "correct": derailed_baseline_correct,
                "total": len(derailed_rows),
                "accuracy": (derailed_baseline_correct / len(derailed_rows)) if derailed_rows else None,
            },
        }

    usage = usage_totals(ordered)
    snapshot_prices = config_snapshot.get("price_table", {})
    model_id = config_snapshot.get("model_id", "")
    cost: Optional[dict] = None
    if model_id in snapshot_prices:
        cost = cost_report(usage, snapshot_prices, model_id, len(graded))

    report = {
        "mode": mode,
        "config": config_snapshot,
        "counts": counts,
        "accuracy": accuracy,
        "confusion_matrix": confusion_matrix(ordered) if mode == MODE_RERAILER else None,
        "usage": usage,
        "cost": cost,
    }
    return report


def report_to_bytes(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _write_csvs(report: dict, out_dir: Path) -> None:
    with open(out_dir / "accuracy_by_category.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["category", "correct", "total", "accuracy"])
        for category, block in sorted(report["accuracy"]["by_category"].items()):
            writer.writerow([category, block["correct"], block["total"], block["accuracy"]])
        overall = report["accuracy"]["overall"]
        writer.writerow(["overall", overall["correct"], overall["total"], overall["accuracy"]])

    with open(out_dir / "confusion_matrix.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["scope", "TP", "TN", "FN", "FP"])
        matrix = report.get("confusion_matrix")
        if matrix:
            overall = matrix["overall"]
            writer.writerow(["overall"] + [overall[c] for c in CELLS])
            for category, cells in sorted(matrix["by_category"].items()):
                writer.writerow([category] + [cells[c] for c in CELLS])

    with open(out_dir / "cost.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["model_id", "n_questions", "cost_usd", "cost_per_1000_usd", "wall_time_s", "hours_per_1000"]
        )
        cost = report.get("cost")
        if cost:
            writer.writerow(
                [
                    cost["model_id"],
                    cost["n_questions"],
                    cost["cost_usd"],
                    cost["cost_per_1000_usd"],
                    cost["wall_time_s"],
                    cost["hours_per_1000"],
                ]
            )


def load_outcomes(path: Path) -> list[QuestionOutcome]:
    outcomes = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                outcomes.append(QuestionOutcome.from_json(json.loads(line)))
    return outcomes


def run(
    questions: list[Question],
    settings: RunSettings,
    mode: str,
    out_dir: str | Path,
    gateway: Gateway,
) -> dict:
    """Run a mode over a dataset and write the full artifact set.

    Questions already present in the directory's outcomes.jsonl are replayed
    from disk (no calls, no billing); only the rest execute, in a worker
    pool of width settings.parallelism.
    """
    if mode not in _MODE_RUNNERS:
        raise ValueError(f"unknown mode {mode!r}")
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    (out_path / TRACE_DIR).mkdir(exist_ok=True)

    config_snapshot = settings.to_json()
    config_snapshot["mode"] = mode
    with open(out_path / CONFIG_FILE, "w", encoding="utf-8") as handle:
        json.dump(config_snapshot, handle, sort_keys=True, indent=2)
        handle.write("\n")

    outcomes_path = out_path / OUTCOMES_FILE
    existing: dict[str, QuestionOutcome] = {}
    if outcomes_path.exists():
        for outcome in load_outcomes(outcomes_path):
            existing[outcome.question_id] = outcome

    pending = [q for q in questions if q.id not in existing]
    write_lock = threading.Lock()
    fresh: dict[str, QuestionOutcome] = {}

    def execute(question: Question) -> None:
        outcome, trace = run_question(question, mode, gateway, settings)
        with write_lock:
            fresh[question.id] = outcome
            with open(outcomes_path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(outcome.to_json(), sort_keys=True) + "\n")
        trace_payload = {"question_id": question.id, "trace": trace}
        with open(out_path / TRACE_DIR / f"{question.id}.json", "w", encoding="utf-8") as handle:
            json.dump(trace_payload, handle, sort_keys=True, indent=2)
            handle.write("\n")

    if pending:
        if settings.parallelism > 1:
            with ThreadPoolExecutor(max_workers=settings.parallelism) as pool:
                list(pool.map(execute, pending))
        else:
            for question in pending:
                execute(question)

    ordered_outcomes = [
        existing.get(q.id) or fresh[q.id] for q in questions
    ]
    report = build_report(ordered_outcomes, config_snapshot, mode)
    with open(out_path / REPORT_FILE, "wb") as handle:
        handle.write(report_to_bytes(report))
    _write_csvs(report, out_path)
    return report


def replay(out_dir: str | Path) -> dict:
    """Recompute the report from a run directory's persisted outcomes."""
    out_path = Path(out_dir)
    outcomes_path = out_path / OUTCOMES_FILE
    config_path = out_path / CONFIG_FILE
    if not outcomes_path.exists() or not config_path.exists():
        raise IncompleteTrace(
            f"{out_dir} lacks {OUTCOMES_FILE} or {CONFIG_FILE}; cannot replay"
        )
    with open(config_path, encoding="utf-8") as handle:
        config_snapshot = json.load(handle)
    outcomes = load_outcomes(outcomes_path)
    return build_report(outcomes, config_snapshot, config_snapshot.get("mode", MODE_RERAILER))
