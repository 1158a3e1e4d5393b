"""Builders shared across the test modules.

Everything here is plain data construction: questions, scripted-backend
entries, fenced agent responses, and a few canned end-to-end scenarios
(consistent, fixable, unfixable) with their exact per-stage call budgets.
"""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Optional

from rerail.config import RunSettings
from rerail.gateway import (
    CallContext,
    CompletionParams,
    CompletionResult,
    Gateway,
    PromptCapture,
    ScriptedBackend,
    Usage,
    serialize_structured,
)
from rerail.types import (
    Category,
    NumericValue,
    Option,
    OptionLabel,
    Question,
    QuestionKind,
    STAGE_COT,
    STAGE_DEBATE,
    STAGE_EVALUATOR,
    STAGE_JUDGE,
    STAGE_REANSWER,
    TextValue,
)


def make_settings(**overrides) -> RunSettings:
    return RunSettings(**overrides)


# ---------------------------------------------------------------------------
# questions

def mcqa_question(
    qid: str = "q1",
    gt: str = "B",
    n_options: int = 4,
    subject: str = "college physics",
    category: Category = Category.ADVANCED_MATH_SCIENCE,
    text: str = "Which option satisfies the stated condition?",
    context: Optional[str] = None,
) -> Question:
    labels = "ABCDEF"[:n_options]
    options = tuple(Option(label, f"choice {label}") for label in labels)
    return Question(
        id=qid,
        subject=subject,
        category=category,
        text=text,
        ground_truth=OptionLabel(gt),
        kind=QuestionKind.MCQA,
        context=context,
        options=options,
    )


def numeric_question(
    qid: str = "q1",
    gt: str = "8",
    subject: str = "grade school math",
    category: Category = Category.MATH,
    text: str = "Compute the requested value.",
) -> Question:
    return Question(
        id=qid,
        subject=subject,
        category=category,
        text=text,
        ground_truth=NumericValue(Fraction(gt)),
        kind=QuestionKind.OPEN_NUMERIC,
    )


def text_question(
    qid: str = "q1",
    gt: str = "GRAVITY",
    subject: str = "physics",
    category: Category = Category.COMMONSENSE,
    text: str = "Name the force pulling the apple down.",
) -> Question:
    return Question(
        id=qid,
        subject=subject,
        category=category,
        text=text,
        ground_truth=TextValue(gt),
        kind=QuestionKind.OPEN_TEXT,
    )


# ---------------------------------------------------------------------------
# raw generations and fenced agent responses

def cot_text(steps: list[str], answer: str) -> str:
    lines = [f"Step {i}: {text}" for i, text in enumerate(steps, start=1)]
    lines.append(f"Answer: {answer}")
    return "\n".join(lines)


def fenced(**fields) -> str:
    return serialize_structured({key: str(value) for key, value in fields.items()})


def evaluator_no(reasoning: str = "the step holds up") -> str:
    return fenced(hallucination="NO", reasoning=reasoning, correction="")


def evaluator_yes(correction: str, reasoning: str = "the step is wrong") -> str:
    return fenced(hallucination="YES", reasoning=reasoning, correction=correction)


def debate_agree(reasoning: str = "the proposed correction is sound") -> str:
    return fenced(verdict="AGREE", reasoning=reasoning, correction="")


def debate_revise(correction: str, reasoning: str = "the correction misses a detail") -> str:
    return fenced(verdict="REVISE", reasoning=reasoning, correction=correction)


def judge_selects(index, rationale: str = "the most coherent path") -> str:
    return fenced(selected=str(index), rationale=rationale)


def mad_answer(answer: str, reasoning: str = "worked through the options") -> str:
    return fenced(answer=answer, reasoning=reasoning)


# ---------------------------------------------------------------------------
# scripted backend plumbing

def entry(
    stage: str,
    qid: str,
    response: str,
    *,
    step_index: Optional[int] = None,
    agent_id: Optional[int] = None,
    round_no: Optional[int] = None,
    prompt_tokens: int = 100,
    completion_tokens: int = 50,
    latency_ms: Optional[float] = None,
) -> dict:
    match: dict = {"stage": stage, "question_id": qid}
    if step_index is not None:
        match["step_index"] = step_index
    if agent_id is not None:
        match["agent_id"] = agent_id
    if round_no is not None:
        match["round"] = round_no
    payload: dict = {
        "match": match,
        "response": response,
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }
    if latency_ms is not None:
        payload["latency_ms"] = latency_ms
    return payload


def scripted_gateway(
    entries: list[dict],
    capture: Optional[PromptCapture] = None,
    **gateway_kwargs,
) -> Gateway:
    return Gateway(ScriptedBackend(entries), capture=capture, **gateway_kwargs)


def write_script(path: str | Path, entries: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        for item in entries:
            handle.write(json.dumps(item) + "\n")
    return path


class RecordingBackend:
    """Wraps a backend and records (params, context) per call."""

    def __init__(self, inner) -> None:
        self.inner = inner
        self.calls: list[tuple[CompletionParams, CallContext]] = []

    def call(self, prompt, params, context) -> CompletionResult:
        self.calls.append((params, context))
        return self.inner.call(prompt, params, context)


class FlakyBackend:
    """Raises the queued exceptions, then returns a fixed result."""

    def __init__(self, failures: list[Exception], text: str = "ok") -> None:
        self._failures = list(failures)
        self._text = text
        self.attempts = 0

    def call(self, prompt, params, context) -> CompletionResult:
        self.attempts += 1
        if self._failures:
            raise self._failures.pop(0)
        return CompletionResult(text=self._text, usage=Usage(10, 5), latency_s=0.01)


# ---------------------------------------------------------------------------
# canned end-to-end scenarios (pipeline mode, n_samples=3, 2 debate agents)
#
# Exact per-stage completions each scenario consumes, assuming every response
# parses on the first try:
#   consistent: 3 cot
#   fixable:    3 cot + 1 judge + 4 evaluator + 2 debate + 1 reanswer = 11
#   unfixable:  3 cot + 1 judge + 3 evaluator + 6 debate + 3 reanswer = 16

CONSISTENT_EXPECTED_CALLS = {"cot": 3}
FIXABLE_EXPECTED_CALLS = {"cot": 3, "judge": 1, "evaluator": 4, "debate": 2, "reanswer": 1}
UNFIXABLE_EXPECTED_CALLS = {"cot": 3, "judge": 1, "evaluator": 3, "debate": 6, "reanswer": 3}


def consistent_script(qid: str, answer: str = "B") -> list[dict]:
    """Three samples that agree outright; never reaches the judge."""
    steps = [
        "Restate what the question is asking for.",
        "Work out each candidate in turn.",
        "Keep the one that satisfies the condition.",
    ]
    return [entry(STAGE_COT, qid, cot_text(steps, answer)) for _ in range(3)]


def fixable_script(qid: str, wrong: str = "A", right: str = "B") -> list[dict]:
    """Derailed, repaired by one correction, certified on the second pass.

    Pass 1 flags step 2 of the selected 3-step path; the re-answered path
    keeps the trusted prefix and lands on the right answer. Pass 2 finds
    nothing left to fix.
    """
    steps = [
        "Identify the given quantities.",
        "Combine them with the wrong operation.",
        "Read off the result.",
    ]
    corrected = "Combine them with the correct operation."
    closing = "Read off the corrected result."
    return [
        entry(STAGE_COT, qid, cot_text(steps, wrong)),
        entry(STAGE_COT, qid, cot_text(steps, right)),
        entry(STAGE_COT, qid, cot_text(steps, wrong)),
        entry(STAGE_JUDGE, qid, judge_selects(1)),
        entry(STAGE_EVALUATOR, qid, evaluator_no(), step_index=1),
        entry(STAGE_EVALUATOR, qid, evaluator_yes(corrected), step_index=2),
        entry(STAGE_DEBATE, qid, debate_agree(), step_index=2, agent_id=1, round_no=1),
        entry(STAGE_DEBATE, qid, debate_agree(), step_index=2, agent_id=2, round_no=1),
        entry(STAGE_REANSWER, qid, cot_text([steps[0], corrected, closing], right)),
        entry(STAGE_EVALUATOR, qid, evaluator_no(), step_index=2),
        entry(STAGE_EVALUATOR, qid, evaluator_no(), step_index=3),
    ]


def unfixable_script(qid: str, wrong: str = "A") -> list[dict]:
    """Derailed and never clean: every pass flags step 1 until the cap."""
    steps = [
        "Assume an equation that does not model the problem.",
        "Carry the assumption to a result.",
    ]
    fixes = [
        "Assume a second equation that still misses a constraint.",
        "Assume a third equation with the sign flipped.",
        "Assume a fourth equation no better than the others.",
    ]
    continuations = [
        "Carry the second assumption through.",
        "Carry the third assumption through.",
        "Carry the fourth assumption through.",
    ]
    script = [
        entry(STAGE_COT, qid, cot_text(steps, wrong)),
        entry(STAGE_COT, qid, cot_text(steps, "C")),
        entry(STAGE_COT, qid, cot_text(steps, wrong)),
        entry(STAGE_JUDGE, qid, judge_selects(1)),
    ]
    for fix, continuation in zip(fixes, continuations):
        script.append(entry(STAGE_EVALUATOR, qid, evaluator_yes(fix), step_index=1))
        script.append(entry(STAGE_DEBATE, qid, debate_agree(), step_index=1, agent_id=1, round_no=1))
        script.append(entry(STAGE_DEBATE, qid, debate_agree(), step_index=1, agent_id=2, round_no=1))
        script.append(entry(STAGE_REANSWER, qid, cot_text([fix, continuation], wrong)))
    return script


def stage_calls(outcome_usage: dict) -> dict[str, int]:
    """Per-stage completion counts from a persisted outcome usage block."""
    return {
        stage: block["live_calls"] + block["cached_calls"]
        for stage, block in outcome_usage.items()
    }


__all__ = [name for name in dir() if not name.startswith("_")]
