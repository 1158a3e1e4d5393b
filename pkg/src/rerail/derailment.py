"""Derailment identification.

Per question: sample n reasoning paths, decide whether their answers are
consistent, and either emit the consistent answer directly or hand the
least-erroneous path (picked by the Judge) to the rerailer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

from .config import RunSettings, question_seed
from .gateway import (
    CallContext,
    CompletionParams,
    Gateway,
    StructuredOutputFailure,
    complete_structured,
)
from .grading import clean_text, normalize_answer
from .parsing import parse_reasoning_path, serialize_path
from .prompts import (
    TEMPLATE_JUDGE,
    TEMPLATE_RAW_COT,
    format_question,
    render_prompt,
)
from .types import (
    NormalizedAnswer,
    ParseFailure,
    Provenance,
    Question,
    ReasoningPath,
    RerailError,
    STAGE_COT,
    STAGE_JUDGE,
    UnnormalizableAnswer,
    VALID_OPTION_LABELS,
)

RULE_ALL_LONG = "AllLong"
RULE_SAME_LEADING_OPTION = "SameLeadingOption"
RULE_ALL_IDENTICAL = "AllIdentical"
RULE_INCONSISTENT = "Inconsistent"

FLAG_ALL_LONG = "consistent-all-long"
FLAG_UNNORMALIZABLE = "answer-unnormalizable"
FLAG_JUDGE_FALLBACK = "judge-fallback-first"
FLAG_JUDGE_DUPLICATED_RP3 = "judge-duplicated-rp3"
FLAG_JUDGE_FIRST_THREE = "judge-first-three"

ALL_LONG_THRESHOLD = 30
SHORT_OPTION_LIMIT = 40

# Consistency cleaning keeps spacing as-is (uppercase, drop everything that
# is not a letter, digit, or space). Distinct from grading.clean_text, which
# also canonicalizes whitespace; this one stays faithful to the reference
# procedure so the two never disagree on a verdict.
_CONSISTENCY_CLEAN_RE = re.compile(r"[^A-Za-z0-9 ]")


class GenerationFailure(RerailError):
    """Too few parseable reasoning paths even after the retry policy."""


@dataclass(frozen=True)
class ConsistencyVerdict:
    consistent: bool
    answers: tuple[str, ...]
    rule_fired: str

    def __post_init__(self) -> None:
        if (self.rule_fired == RULE_INCONSISTENT) == self.consistent:
            raise ValueError("rule_fired must be Inconsistent exactly when consistent is false")


def _consistency_clean(option: str) -> str:
    return _CONSISTENCY_CLEAN_RE.sub("", option).upper()


def check_consistency(answers: list[str]) -> ConsistencyVerdict:
    """Apply the four consistency rules, in order, to raw answer strings.

    1. Every raw answer longer than 30 characters -> consistent (AllLong).
    2. Clean each answer (keep alphanumerics and spaces, uppercase).
    3. All cleaned answers begin with the same option letter A..F and are
       shorter than 40 characters -> consistent (SameLeadingOption).
    4. All cleaned answers identical -> consistent (AllIdentical).
    Otherwise inconsistent.
    """
    if not answers:
        raise ValueError("check_consistency needs at least one answer")
    frozen = tuple(answers)

    if all(len(answer) > ALL_LONG_THRESHOLD for answer in frozen):
        return ConsistencyVerdict(True, frozen, RULE_ALL_LONG)

    cleaned = [_consistency_clean(answer) for answer in frozen]

    if (
        all(cleaned)
        and len({c[0] for c in cleaned}) == 1
        and cleaned[0][0] in VALID_OPTION_LABELS
        and all(len(c) < SHORT_OPTION_LIMIT for c in cleaned)
    ):
        return ConsistencyVerdict(True, frozen, RULE_SAME_LEADING_OPTION)

    if len(set(cleaned)) == 1:
        return ConsistencyVerdict(True, frozen, RULE_ALL_IDENTICAL)

    return ConsistencyVerdict(False, frozen, RULE_INCONSISTENT)


def _cot_params(settings: RunSettings, seed: int) -> CompletionParams:
    return CompletionParams(
        model_id=settings.model_id,
        temperature=settings.sampling_temperature,
        seed=seed,
    )


def generate_rps(
    question: Question,
    gateway: Gateway,
    settings: RunSettings,
    n: Optional[int] = None,
    stage: str = STAGE_COT,
) -> list[ReasoningPath]:
    """Sample n reasoning paths from independent raw chain-of-thought calls.

    An unparseable sample is regenerated once (fresh seed past the sample
    range) and dropped if still unparseable. Raises GenerationFailure when
    fewer than min(2, n) parseable paths remain.
    """
    count = settings.n_samples if n is None else n
    if count < 1:
        raise ValueError("n must be >= 1")
    base = question_seed(settings.seed, question.id)
    prompt = render_prompt(
        TEMPLATE_RAW_COT,
        {
            "subject": question.subject,
            "question": format_question(question.text, question.context, question.options),
        },
    )
    context = CallContext(stage=stage, question_id=question.id)

    paths: list[ReasoningPath] = []
    retries_used = 0
    for i in range(count):
        result = gateway.complete(prompt, _cot_params(settings, base + i), context)
        try:
            paths.append(parse_reasoning_path(result.text, Provenance.raw_cot()))
            continue
        except ParseFailure:
            pass
        retry = gateway.complete(
            prompt, _cot_params(settings, base + count + retries_used), context
        )
        retries_used += 1
        try:
            paths.append(parse_reasoning_path(retry.text, Provenance.raw_cot()))
        except ParseFailure:
            continue  # discarded from the consistency set

    if len(paths) < min(2, count):
        raise GenerationFailure(
            f"question {question.id!r}: only {len(paths)} of {count} samples parseable"
        )
    return paths


def _judge_validate(allowed: set[str]):
    def validate(parsed: dict[str, str]) -> None:
        if parsed.get("selected") not in allowed:
            raise ValueError(
                f"judge selection must be one of {sorted(allowed)}, got {parsed.get('selected')!r}"
            )

    return validate


def judge(
    question: Question,
    paths: list[ReasoningPath],
    gateway: Gateway,
    settings: RunSettings,
) -> tuple[int, str, list[str]]:
    """Pick the most logically sound path. Returns (1-based index, rationale,
    flags). Falls back to index 1 after the re-ask budget is spent."""
    if len(paths) < 2:
        raise ValueError("judging needs at least two paths")

    flags: list[str] = []
    candidates = list(paths[:3])
    allowed = {"1", "2", "3"}
    if len(paths) == 2:
        # The template has exactly three slots; repeat the second path and
        # never allow the duplicate to win.
        candidates = [paths[0], paths[1], paths[1]]
        allowed = {"1", "2"}
        flags.append(FLAG_JUDGE_DUPLICATED_RP3)
    elif len(paths) > 3:
        flags.append(FLAG_JUDGE_FIRST_THREE)

    prompt = render_prompt(
        TEMPLATE_JUDGE,
        {
            "subject": question.subject,
            "question": format_question(question.text, question.context, question.options),
            "rp1": serialize_path(candidates[0]),
            "rp2": serialize_path(candidates[1]),
            "rp3": serialize_path(candidates[2]),
        },
    )
    params = CompletionParams(
        model_id=settings.model_id,
        temperature=settings.temperature,
        seed=question_seed(settings.seed, question.id),
    )
    context = CallContext(stage=STAGE_JUDGE, question_id=question.id)
    try:
        parsed = complete_structured(
            gateway, prompt, params, context, validate=_judge_validate(allowed)
        )
    except StructuredOutputFailure:
        flags.append(FLAG_JUDGE_FALLBACK)
        return 1, "fallback:first", flags
    return int(parsed["selected"]), parsed.get("rationale", ""), flags


@dataclass(frozen=True)
class Consistent:
    """All sampled answers agree; the pipeline stops here for this question."""

    answer_raw: str
    answer: Optional[NormalizedAnswer]
    paths: tuple[ReasoningPath, ...]
    verdict: ConsistencyVerdict
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class Derailed:
    """Sampled answers disagree; `selected` goes on to the rerailer."""

    selected: ReasoningPath
    selected_index: int
    all_paths: tuple[ReasoningPath, ...]
    judge_rationale: str
    verdict: ConsistencyVerdict
    flags: tuple[str, ...] = ()


Routed = Union[Consistent, Derailed]


def _answer_bucket(raw: str, question: Question):
    """Hashable identity of an answer for majority counting."""
    try:
        return normalize_answer(raw, question.kind)
    except UnnormalizableAnswer:
        return ("unnormalizable", clean_text(raw))


def _resolve_consistent_answer(
    paths: list[ReasoningPath], verdict: ConsistencyVerdict, question: Question
) -> tuple[str, Optional[NormalizedAnswer], list[str]]:
    flags: list[str] = []
    if verdict.rule_fired == RULE_ALL_LONG and len(paths) > 1:
        # Long answers are deemed consistent without agreeing; output the
        # majority answer, first-reached on ties.
        flags.append(FLAG_ALL_LONG)
        buckets = [_answer_bucket(p.final_answer, question) for p in paths]
        counts: dict = {}
        for bucket in buckets:
            counts[bucket] = counts.get(bucket, 0) + 1
        best = max(counts.values())
        winner = next(b for b in buckets if counts[b] == best)
        raw = next(
            p.final_answer for p, b in zip(paths, buckets) if b == winner
        )
    else:
        raw = paths[0].final_answer

    try:
        normalized = normalize_answer(raw, question.kind)
    except UnnormalizableAnswer:
        normalized = None
        flags.append(FLAG_UNNORMALIZABLE)
    return raw, normalized, flags


def route(question: Question, gateway: Gateway, settings: RunSettings) -> Routed:
    """Sample, check consistency, and either answer or select for rerailing."""
    paths = generate_rps(question, gateway, settings)
    verdict = check_consistency([p.final_answer for p in paths])

    if verdict.consistent:
        raw, normalized, flags = _resolve_consistent_answer(paths, verdict, question)
        return Consistent(
            answer_raw=raw,
            answer=normalized,
            paths=tuple(paths),
            verdict=verdict,
            flags=tuple(flags),
        )

    index, rationale, flags = judge(question, paths, gateway, settings)
    return Derailed(
        selected=paths[index - 1],
        selected_index=index,
        all_paths=tuple(paths),
        judge_rationale=rationale,
        verdict=verdict,
        flags=tuple(flags),
    )
