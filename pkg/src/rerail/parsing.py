"""Segmenting raw generations into reasoning paths.

A generation is accepted when it contains at least one step marker and a final
answer marker. Step markers come in two shapes, tried in this order:

1. ``Step <k>:`` headings (case-insensitive, optional ``#``).
2. Bare ordinal lines such as ``1. ...`` when no ``Step k:`` heading exists.

Everything after the answer marker on its line is the raw final answer.
"""

from __future__ import annotations

import re
from typing import Optional

from .types import (
    ParseFailure,
    Provenance,
    ReasoningPath,
    Step,
    StepStatus,
)

# "Step 3:", "step #3.", "Step 3)" at the start of a line.
STEP_MARKER_RE = re.compile(r"(?im)^\s*step\s*#?\s*(\d+)\s*[:.)]\s*")

# "1. text" ordinal fallback. Requires trailing whitespace after the dot so a
# decimal number like "3.14" never starts a step.
ORDINAL_MARKER_RE = re.compile(r"(?m)^\s*(\d+)\.\s+")

# The answer section starts at the last "Answer:" or "Final Answer:" line.
ANSWER_MARKER_RE = re.compile(r"(?im)^.*?\b(?:final\s+)?answer\s*:\s*(.+?)\s*$")

VERIFIED_MARKER = "(verified)"


def _find_step_spans(text: str) -> list[tuple[int, int, int]]:
    """(declared_index, start_of_body, start_of_marker) per step marker."""
    spans = [(int(m.group(1)), m.end(), m.start()) for m in STEP_MARKER_RE.finditer(text)]
    if spans:
        return spans
    return [(int(m.group(1)), m.end(), m.start()) for m in ORDINAL_MARKER_RE.finditer(text)]


def parse_reasoning_path(
    text: str,
    provenance: Optional[Provenance] = None,
) -> ReasoningPath:
    """Parse a raw generation into steps plus a final answer.

    Raises ParseFailure when no step marker or no answer marker is present,
    or when the answer marker precedes every step.
    """
    if provenance is None:
        provenance = Provenance.raw_cot()

    answer_match = None
    for answer_match in ANSWER_MARKER_RE.finditer(text):
        pass  # keep the last marker: models often restate "Answer:" at the end
    if answer_match is None:
        raise ParseFailure("no answer marker found")
    raw_answer = answer_match.group(1).strip()
    if not raw_answer:
        raise ParseFailure("answer marker present but empty")

    body = text[: answer_match.start()]
    spans = _find_step_spans(body)
    if not spans:
        raise ParseFailure("no step markers found before the answer")

    steps = []
    for position, (_, body_start, marker_start) in enumerate(spans, start=1):
        end = spans[position][2] if position < len(spans) else len(body)
        step_text = body[body_start:end].strip()
        if not step_text:
            raise ParseFailure(f"step {position} has no text")
        steps.append(Step(index=position, text=step_text))

    return ReasoningPath(
        steps=tuple(steps),
        final_answer=raw_answer,
        provenance=provenance,
        raw_text=text,
    )


def serialize_steps(
    path: ReasoningPath,
    upto: Optional[int] = None,
    verified_markers: bool = True,
) -> str:
    """Render steps 1..upto (all when upto is None) back into marker form.

    Verified steps carry the trailing verified marker so a later evaluator
    pass can skip them without another call; pass verified_markers=False for
    prompts that should see plain step text.
    """
    limit = path.num_steps if upto is None else upto
    lines = []
    for step in path.steps[:limit]:
        wants_marker = verified_markers and step.status is StepStatus.VERIFIED
        suffix = f" {VERIFIED_MARKER}" if wants_marker else ""
        lines.append(f"Step {step.index}: {step.text}{suffix}")
    return "\n".join(lines)


def serialize_path(path: ReasoningPath) -> str:
    """Steps plus the final-answer line, the inverse of parsing."""
    return f"{serialize_steps(path)}\nFinal answer: {path.final_answer}"


def count_steps(path: ReasoningPath) -> int:
    return path.num_steps


def step_section(path: ReasoningPath, index: int) -> str:
    """The text of one step (1-based), marker stripped."""
    if not 1 <= index <= path.num_steps:
        raise IndexError(f"step index {index} out of range 1..{path.num_steps}")
    return path.steps[index - 1].text
