"""Domain types shared by every pipeline stage.

All types here are frozen value objects: safe to share across worker threads,
never mutated after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Union

VALID_OPTION_LABELS = ("A", "B", "C", "D", "E", "F")

# Pipeline stages, used both for usage attribution and for matching scripted
# responses to the call that consumes them.
STAGE_COT = "cot"
STAGE_JUDGE = "judge"
STAGE_EVALUATOR = "evaluator"
STAGE_DEBATE = "debate"
STAGE_REANSWER = "reanswer"
STAGE_MAD = "mad"
ALL_STAGES = (
    STAGE_COT,
    STAGE_JUDGE,
    STAGE_EVALUATOR,
    STAGE_DEBATE,
    STAGE_REANSWER,
    STAGE_MAD,
)


class RerailError(Exception):
    """Base class for every error this package raises on purpose."""


class ParseFailure(RerailError):
    """A generation could not be segmented into steps plus an answer."""


class UnnormalizableAnswer(RerailError):
    """A raw answer string could not be normalized for its question kind."""


class KindMismatch(RerailError):
    """Two answers of incompatible kinds were compared."""


class DatasetError(RerailError):
    """A dataset record violates the input schema."""


class QuestionKind(str, Enum):
    MCQA = "MCQA"
    OPEN_NUMERIC = "OpenEndedNumeric"
    OPEN_TEXT = "OpenEndedText"


class Category(str, Enum):
    COMMONSENSE = "CommonsenseReasoning"
    MATH = "Math"
    ADVANCED_MATH_SCIENCE = "AdvancedMathScience"


class StepStatus(str, Enum):
    UNVERIFIED = "unverified"
    VERIFIED = "verified"
    CORRECTED = "corrected"


@dataclass(frozen=True)
class OptionLabel:
    """A multiple-choice answer: one of the labels A..F."""

    label: str

    def __post_init__(self) -> None:
        if self.label not in VALID_OPTION_LABELS:
            raise UnnormalizableAnswer(
                f"option label must be one of {''.join(VALID_OPTION_LABELS)}, got {self.label!r}"
            )

    def as_text(self) -> str:
        return self.label


@dataclass(frozen=True)
class NumericValue:
    """An exact numeric answer (stored as a rational)."""

    value: Fraction

    def as_text(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class TextValue:
    """A free-text answer in cleaned, uppercased canonical form."""

    text: str

    def as_text(self) -> str:
        return self.text


NormalizedAnswer = Union[OptionLabel, NumericValue, TextValue]

# Ground truths share the normalized-answer shape.
GroundTruth = NormalizedAnswer


def answer_to_json(answer: Optional[NormalizedAnswer]) -> Optional[dict]:
    """JSON-able encoding of a normalized answer (None passes through)."""
    if answer is None:
        return None
    if isinstance(answer, OptionLabel):
        return {"kind": "option", "value": answer.label}
    if isinstance(answer, NumericValue):
        return {"kind": "numeric", "value": str(answer.value)}
    if isinstance(answer, TextValue):
        return {"kind": "text", "value": answer.text}
    raise TypeError(f"not a normalized answer: {answer!r}")


def answer_from_json(payload: Optional[dict]) -> Optional[NormalizedAnswer]:
    if payload is None:
        return None
    kind = payload.get("kind")
    value = payload.get("value", "")
    if kind == "option":
        return OptionLabel(value)
    if kind == "numeric":
        return NumericValue(Fraction(value))
    if kind == "text":
        return TextValue(value)
    raise DatasetError(f"unknown answer kind {kind!r}")


@dataclass(frozen=True)
class Option:
    """One labeled multiple-choice option."""

    label: str
    text: str


@dataclass(frozen=True)
class Question:
    """One QA item: text, optional context/options, and its ground truth."""

    id: str
    subject: str
    category: Category
    text: str
    ground_truth: GroundTruth
    kind: QuestionKind
    context: Optional[str] = None
    options: Optional[tuple[Option, ...]] = None

    def __post_init__(self) -> None:
        if self.kind is QuestionKind.MCQA:
            if not self.options:
                raise DatasetError(f"question {self.id!r}: MCQA requires non-empty options")
            labels = [o.label for o in self.options]
            if len(set(labels)) != len(labels):
                raise DatasetError(f"question {self.id!r}: duplicate option labels {labels}")
            bad = [l for l in labels if l not in VALID_OPTION_LABELS]
            if bad:
                raise DatasetError(
                    f"question {self.id!r}: option labels must come from "
                    f"{''.join(VALID_OPTION_LABELS)}, got {bad}"
                )
            if not isinstance(self.ground_truth, OptionLabel):
                raise DatasetError(f"question {self.id!r}: MCQA ground truth must be an option label")
            if self.ground_truth.label not in labels:
                raise DatasetError(
                    f"question {self.id!r}: ground truth {self.ground_truth.label!r} "
                    f"is not among the option labels {labels}"
                )
        elif self.kind is QuestionKind.OPEN_NUMERIC:
            if not isinstance(self.ground_truth, NumericValue):
                raise DatasetError(f"question {self.id!r}: numeric question needs a numeric ground truth")
        elif self.kind is QuestionKind.OPEN_TEXT:
            if not isinstance(self.ground_truth, TextValue):
                raise DatasetError(f"question {self.id!r}: text question needs a text ground truth")


# Provenance origins for reasoning paths.
PROV_RAW_COT = "raw_cot"
PROV_JUDGE_SELECTED = "judge_selected"
PROV_RERAILED = "rerailed"


@dataclass(frozen=True)
class Provenance:
    """Which stage produced a reasoning path."""

    origin: str
    iteration: int = 0

    @classmethod
    def raw_cot(cls) -> "Provenance":
        return cls(PROV_RAW_COT)

    @classmethod
    def judge_selected(cls) -> "Provenance":
        return cls(PROV_JUDGE_SELECTED)

    @classmethod
    def rerailed(cls, iteration: int) -> "Provenance":
        return cls(PROV_RERAILED, iteration)


@dataclass(frozen=True)
class Step:
    """One reasoning step. Corrected steps keep the text they replaced."""

    index: int
    text: str
    status: StepStatus = StepStatus.UNVERIFIED
    original: Optional[str] = None
    stale: bool = False


@dataclass(frozen=True)
class ReasoningPath:
    """Ordered steps plus the final answer of one generation."""

    steps: tuple[Step, ...]
    final_answer: str
    provenance: Provenance = field(default_factory=Provenance.raw_cot)
    raw_text: str = ""

    def __post_init__(self) -> None:
        if not self.steps:
            raise ParseFailure("a reasoning path needs at least one step")
        for position, step in enumerate(self.steps, start=1):
            if step.index != position:
                raise ParseFailure(
                    f"step indices must be contiguous from 1, got {step.index} at position {position}"
                )

    @property
    def num_steps(self) -> int:
        return len(self.steps)
