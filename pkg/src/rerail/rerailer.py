"""Step-by-step repair of a derailed reasoning path.

One pass walks the steps in order. Each step is evaluated against only the
prefix up to itself (later steps are masked out); the first step flagged as
hallucinated gets a correction, the correction is validated by a short
multi-agent debate, the corrected prefix is spliced in, and the rest of the
path is regenerated from that prefix. The pass returns immediately after one
correction. The outer loop repeats passes until one finds nothing to fix or
the iteration cap is hit; steps settled by earlier passes carry a
"(verified)" marker in serialized form and are passed without a model call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .config import RunSettings, question_seed
from .gateway import (
    CallContext,
    CompletionParams,
    Gateway,
    StructuredOutputFailure,
    complete_structured,
)
from .parsing import parse_reasoning_path, serialize_steps
from .prompts import (
    TEMPLATE_DEBATE_MITIGATOR,
    TEMPLATE_REANSWER,
    TEMPLATE_STEP_EVALUATOR,
    format_question,
    render_prompt,
)
from .types import (
    ParseFailure,
    Provenance,
    Question,
    ReasoningPath,
    RerailError,
    STAGE_DEBATE,
    STAGE_EVALUATOR,
    STAGE_REANSWER,
    Step,
    StepStatus,
)

VERDICT_AGREE = "AGREE"
VERDICT_REVISE = "REVISE"

FLAG_EVALUATOR_FAIL_OPEN = "evaluator-parse-fail-open"
FLAG_DEBATE_FAIL_OPEN = "debate-parse-fail-open"
FLAG_DEBATE_TIE = "debate-tie"
FLAG_STEP_BUDGET = "reanswer-step-budget-exceeded"
FLAG_PREFIX_DIVERGENCE = "reanswer-prefix-divergence"
FLAG_UNCERTIFIED = "uncertified"


class IndexOutOfRange(RerailError):
    pass


@dataclass(frozen=True)
class EvaluationResult:
    hallucination: bool
    verification_reasoning: str
    proposed_correction: Optional[str] = None
    auto: bool = False  # settled in an earlier pass, no call made
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.hallucination and self.proposed_correction is not None:
            raise ValueError("a clean step cannot carry a correction")


@dataclass(frozen=True)
class DebateTurn:
    agent_id: int
    round: int
    verdict: str
    reasoning: str = ""
    correction: str = ""


@dataclass(frozen=True)
class DebateOutcome:
    accepted: bool  # final correction is the evaluator's original proposal
    final_correction: str
    transcript: tuple[DebateTurn, ...]
    rounds_run: int
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class RerailResult:
    path: ReasoningPath
    iterations_run: int
    certified: bool
    flags: tuple[str, ...]
    trace: dict = field(default_factory=dict)


def mask(rp: ReasoningPath, index: int) -> str:
    """Steps 1..index rendered for the evaluator; nothing after leaks in."""
    if not 1 <= index <= rp.num_steps:
        raise IndexOutOfRange(f"step index {index} out of range 1..{rp.num_steps}")
    return serialize_steps(rp, upto=index)


def _call_seed(settings: RunSettings, question_id: str, *parts) -> int:
    tag = ":".join(str(p) for p in parts)
    return question_seed(settings.seed, f"{question_id}:{tag}")


def _agent_params(settings: RunSettings, seed: int) -> CompletionParams:
    return CompletionParams(
        model_id=settings.model_id, temperature=settings.temperature, seed=seed
    )


def _parse_yes_no(value: Optional[str]) -> bool:
    if value is None:
        raise ValueError("missing hallucination verdict")
    token = value.strip().strip("[]").strip().upper()
    if token == "YES":
        return True
    if token == "NO":
        return False
    raise ValueError(f"hallucination verdict must be YES or NO, got {value!r}")


def _validate_evaluation(parsed: dict[str, str]) -> None:
    flagged = _parse_yes_no(parsed.get("hallucination"))
    if flagged and not parsed.get("correction", "").strip():
        raise ValueError("hallucination=YES requires a non-empty correction")


def evaluate_step(
    question: Question,
    rp: ReasoningPath,
    index: int,
    gateway: Gateway,
    settings: RunSettings,
) -> EvaluationResult:
    """Check one step for factuality/faithfulness hallucination.

    Steps already verified by an earlier pass are auto-passed without a
    call. A parse failure after the single re-ask fails open: the step is
    treated as clean and the result is flagged.
    """
    if not 1 <= index <= rp.num_steps:
        raise IndexOutOfRange(f"step index {index} out of range 1..{rp.num_steps}")
    step = rp.steps[index - 1]
    if step.status is StepStatus.VERIFIED:
        return EvaluationResult(False, "previously verified", auto=True)

    prompt = render_prompt(
        TEMPLATE_STEP_EVALUATOR,
        {
            "subject": question.subject,
            "current_step": index,
            "RP": mask(rp, index),
            "question": format_question(question.text, question.context, question.options),
        },
    )
    context = CallContext(stage=STAGE_EVALUATOR, question_id=question.id, step_index=index)
    params = _agent_params(settings, _call_seed(settings, question.id, "eval", index))
    try:
        parsed = complete_structured(gateway, prompt, params, context, validate=_validate_evaluation)
    except StructuredOutputFailure:
        return EvaluationResult(False, "", flags=(FLAG_EVALUATOR_FAIL_OPEN,))

    if _parse_yes_no(parsed["hallucination"]):
        return EvaluationResult(
            hallucination=True,
            verification_reasoning=parsed.get("reasoning", ""),
            proposed_correction=parsed["correction"].strip(),
        )
    return EvaluationResult(False, parsed.get("reasoning", ""))


def _validate_debate(parsed: dict[str, str]) -> None:
    verdict = (parsed.get("verdict") or "").strip().strip("[]").strip().upper()
    if verdict not in (VERDICT_AGREE, VERDICT_REVISE):
        raise ValueError(f"debate verdict must be AGREE or REVISE, got {parsed.get('verdict')!r}")
    if verdict == VERDICT_REVISE and not parsed.get("correction", "").strip():
        raise ValueError("verdict=REVISE requires a non-empty correction")


def _turn_text(turn: DebateTurn) -> str:
    text = f"Agent {turn.agent_id} (round {turn.round}) [{turn.verdict}]: {turn.reasoning}"
    if turn.verdict == VERDICT_REVISE and turn.correction:
        text += f"\nAgent {turn.agent_id} revised correction: {turn.correction}"
    return text


def debate(
    question: Question,
    masked: str,
    current_index: int,
    correction: str,
    gateway: Gateway,
    settings: RunSettings,
) -> DebateOutcome:
    """Validate a proposed correction through rounds of agent debate.

    Unanimous agreement at a round end accepts the standing correction and
    stops early. A revision replaces the standing correction at the round
    boundary. After the last round the majority verdict decides; a tie keeps
    the standing correction and is flagged.
    """
    if not correction.strip():
        raise ValueError("debate needs a non-empty proposed correction")

    original = correction
    standing = correction
    transcript: list[DebateTurn] = []
    flags: list[str] = []
    question_slot = format_question(question.text, question.context, question.options)
    rounds_run = 0

    for round_no in range(1, settings.n_debate_rounds + 1):
        rounds_run = round_no
        prior = [t for t in transcript if t.round < round_no]
        response_parts = [f"The proposed correction for the current step: {standing}"]
        response_parts.extend(_turn_text(t) for t in prior)
        response_slot = "\n".join(response_parts)

        round_turns: list[DebateTurn] = []
        for agent_id in range(1, settings.n_debate_agents + 1):
            prompt = render_prompt(
                TEMPLATE_DEBATE_MITIGATOR,
                {
                    "subject": question.subject,
                    "current_step": current_index,
                    "RP": masked,
                    "question": question_slot,
                    "response": response_slot,
                },
            )
            context = CallContext(
                stage=STAGE_DEBATE,
                question_id=question.id,
                step_index=current_index,
                agent_id=agent_id,
                round=round_no,
            )
            params = _agent_params(
                settings,
                _call_seed(settings, question.id, "debate", current_index, agent_id, round_no),
            )
            try:
                parsed = complete_structured(gateway, prompt, params, context, validate=_validate_debate)
                verdict = parsed["verdict"].strip().strip("[]").strip().upper()
                turn = DebateTurn(
                    agent_id=agent_id,
                    round=round_no,
                    verdict=verdict,
                    reasoning=parsed.get("reasoning", ""),
                    correction=parsed.get("correction", "").strip(),
                )
            except StructuredOutputFailure:
                turn = DebateTurn(agent_id=agent_id, round=round_no, verdict=VERDICT_AGREE)
                flags.append(FLAG_DEBATE_FAIL_OPEN)
            round_turns.append(turn)
        transcript.extend(round_turns)

        if all(t.verdict == VERDICT_AGREE for t in round_turns):
            return DebateOutcome(
                accepted=standing == original,
                final_correction=standing,
                transcript=tuple(transcript),
                rounds_run=rounds_run,
                flags=tuple(flags),
            )
        # Revisions land at the round boundary; the last reviser wins.
        for turn in round_turns:
            if turn.verdict == VERDICT_REVISE:
                standing = turn.correction

    last_round = [t for t in transcript if t.round == rounds_run]
    agrees = sum(1 for t in last_round if t.verdict == VERDICT_AGREE)
    revises = len(last_round) - agrees
    # The correction debated in the final round: all revisions before it,
    # none from it. `standing` has already absorbed the final round's.
    debated_in_last = original
    for turn in transcript:
        if turn.round < rounds_run and turn.verdict == VERDICT_REVISE:
            debated_in_last = turn.correction
    if revises > agrees:
        final = standing  # majority revised; the latest revision carries
    else:
        final = debated_in_last
        if agrees == revises:
            flags.append(FLAG_DEBATE_TIE)
    return DebateOutcome(
        accepted=final == original,
        final_correction=final,
        transcript=tuple(transcript),
        rounds_run=rounds_run,
        flags=tuple(flags),
    )


def splice(rp: ReasoningPath, index: int, corrected_text: str) -> ReasoningPath:
    """Replace step `index` with its correction.

    Steps before it become Verified; steps after it stay but are marked
    stale (a re-answer is expected to regenerate them).
    """
    if not 1 <= index <= rp.num_steps:
        raise IndexOutOfRange(f"step index {index} out of range 1..{rp.num_steps}")
    new_steps = []
    for step in rp.steps:
        if step.index < index:
            new_steps.append(
                Step(step.index, step.text, StepStatus.VERIFIED, step.original, stale=False)
            )
        elif step.index == index:
            new_steps.append(
                Step(step.index, corrected_text, StepStatus.CORRECTED, original=step.text)
            )
        else:
            new_steps.append(Step(step.index, step.text, step.status, step.original, stale=True))
    return ReasoningPath(
        steps=tuple(new_steps),
        final_answer=rp.final_answer,
        provenance=rp.provenance,
        raw_text=rp.raw_text,
    )


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def reanswer(
    question: Question,
    prefix_steps: tuple[Step, ...],
    iteration: int,
    gateway: Gateway,
    settings: RunSettings,
) -> tuple[ReasoningPath, list[str]]:
    """Regenerate the rest of the path from a trusted prefix.

    Returns (path, flags). The generation is truncated (and flagged) past
    max_reanswer_steps; a continuation that rewrites the prefix is flagged
    but not rejected.
    """
    if not prefix_steps:
        raise ValueError("reanswer needs a non-empty prefix")
    if prefix_steps[-1].status not in (StepStatus.CORRECTED, StepStatus.VERIFIED):
        raise ValueError("prefix must end at a corrected or verified step")

    prefix_path = ReasoningPath(
        steps=tuple(prefix_steps), final_answer="pending", provenance=Provenance.rerailed(iteration)
    )
    prompt = render_prompt(
        TEMPLATE_REANSWER,
        {
            "subject": question.subject,
            "question": format_question(question.text, question.context, question.options),
            "RP": serialize_steps(prefix_path, verified_markers=False),
        },
    )
    context = CallContext(stage=STAGE_REANSWER, question_id=question.id)
    seed = _call_seed(settings, question.id, "reanswer", iteration)

    parsed: Optional[ReasoningPath] = None
    last_error: Optional[ParseFailure] = None
    for attempt in range(2):
        result = gateway.complete(prompt, _agent_params(settings, seed + attempt), context)
        try:
            parsed = parse_reasoning_path(result.text, Provenance.rerailed(iteration))
            break
        except ParseFailure as exc:
            last_error = exc
    if parsed is None:
        assert last_error is not None
        raise last_error

    flags: list[str] = []
    steps = list(parsed.steps)
    if len(steps) > settings.max_reanswer_steps:
        steps = steps[: settings.max_reanswer_steps]
        flags.append(FLAG_STEP_BUDGET)

    prefix_preserved = len(steps) >= len(prefix_steps) and all(
        _normalize_ws(steps[i].text) == _normalize_ws(prefix_steps[i].text)
        for i in range(len(prefix_steps))
    )
    if prefix_preserved:
        rebuilt = [
            Step(i + 1, steps[i].text, prefix_steps[i].status, prefix_steps[i].original)
            for i in range(len(prefix_steps))
        ]
        rebuilt.extend(
            Step(i + 1, steps[i].text, StepStatus.UNVERIFIED) for i in range(len(prefix_steps), len(steps))
        )
        steps = rebuilt
    else:
        # The model ignored its instructions; keep its output but drop the
        # trusted statuses so the next pass re-checks everything.
        flags.append(FLAG_PREFIX_DIVERGENCE)
        steps = [Step(i + 1, s.text, StepStatus.UNVERIFIED) for i, s in enumerate(steps)]

    return (
        ReasoningPath(
            steps=tuple(steps),
            final_answer=parsed.final_answer,
            provenance=Provenance.rerailed(iteration),
            raw_text=parsed.raw_text,
        ),
        flags,
    )


@dataclass(frozen=True)
class PassResult:
    changed: bool
    rp_out: ReasoningPath
    flags: tuple[str, ...]
    trace: dict


def rerail_pass(
    question: Question,
    rp: ReasoningPath,
    iteration: int,
    gateway: Gateway,
    settings: RunSettings,
) -> PassResult:
    """One sweep: evaluate steps in order, fix the first flagged one.

    Returns immediately after splice + re-answer; a sweep with no flagged
    step marks every step Verified and reports changed=False.
    """
    flags: list[str] = []
    evaluations: list[dict] = []
    for index in range(1, rp.num_steps + 1):
        evaluation = evaluate_step(question, rp, index, gateway, settings)
        flags.extend(evaluation.flags)
        evaluations.append(
            {
                "step": index,
                "hallucination": evaluation.hallucination,
                "auto": evaluation.auto,
                "reasoning": evaluation.verification_reasoning,
            }
        )
        if not evaluation.hallucination:
            continue

        assert evaluation.proposed_correction is not None
        masked = mask(rp, index)
        outcome = debate(
            question, masked, index, evaluation.proposed_correction, gateway, settings
        )
        flags.extend(outcome.flags)
        spliced = splice(rp, index, outcome.final_correction)
        rp_new, reanswer_flags = reanswer(
            question, spliced.steps[:index], iteration, gateway, settings
        )
        flags.extend(reanswer_flags)
        trace = {
            "iteration": iteration,
            "evaluations": evaluations,
            "corrected_step": index,
            "proposed_correction": evaluation.proposed_correction,
            "debate": {
                "accepted": outcome.accepted,
                "final_correction": outcome.final_correction,
                "rounds_run": outcome.rounds_run,
                "transcript": [
                    {
                        "agent_id": t.agent_id,
                        "round": t.round,
                        "verdict": t.verdict,
                        "reasoning": t.reasoning,
                        "correction": t.correction,
                    }
                    for t in outcome.transcript
                ],
            },
            "reanswer_answer": rp_new.final_answer,
            "flags": sorted(set(flags)),
        }
        return PassResult(changed=True, rp_out=rp_new, flags=tuple(flags), trace=trace)

    verified = ReasoningPath(
        steps=tuple(
            Step(s.index, s.text, StepStatus.VERIFIED, s.original) for s in rp.steps
        ),
        final_answer=rp.final_answer,
        provenance=rp.provenance,
        raw_text=rp.raw_text,
    )
    trace = {
        "iteration": iteration,
        "evaluations": evaluations,
        "corrected_step": None,
        "flags": sorted(set(flags)),
    }
    return PassResult(changed=False, rp_out=verified, flags=tuple(flags), trace=trace)


def rerail(
    question: Question,
    rp: ReasoningPath,
    gateway: Gateway,
    settings: RunSettings,
) -> RerailResult:
    """Repeat passes until one is clean or the iteration cap is reached.

    Hitting the cap is not an error: the last path is returned with the
    uncertified flag.
    """
    current = rp
    flags: list[str] = []
    passes: list[dict] = []
    for iteration in range(1, settings.max_rerail_iterations + 1):
        result = rerail_pass(question, current, iteration, gateway, settings)
        flags.extend(result.flags)
        passes.append(result.trace)
        current = result.rp_out
        if not result.changed:
            return RerailResult(
                path=current,
                iterations_run=iteration,
                certified=True,
                flags=tuple(sorted(set(flags))),
                trace={"passes": passes},
            )
    flags.append(FLAG_UNCERTIFIED)
    return RerailResult(
        path=current,
        iterations_run=settings.max_rerail_iterations,
        certified=False,
        flags=tuple(sorted(set(flags))),
        trace={"passes": passes},
    )
