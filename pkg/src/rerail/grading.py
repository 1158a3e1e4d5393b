"""Answer normalization and grading.

Normalization is per question kind:

* MCQA: strip decoration, keep the leading option letter A..F.
* Numeric: parse to an exact rational (handles signs, commas, currency,
  percents, scientific notation, simple fractions).
* Text: drop everything but letters, digits, and spaces, collapse runs of
  whitespace, uppercase.

Comparison is exact for options and text. Numeric answers match within
abs 1e-6 or rel 1e-4, evaluated in rational arithmetic so the tolerance check
itself introduces no rounding.
"""

from __future__ import annotations

import re
from fractions import Fraction
from typing import Optional

from .types import (
    KindMismatch,
    NormalizedAnswer,
    NumericValue,
    OptionLabel,
    QuestionKind,
    TextValue,
    UnnormalizableAnswer,
    VALID_OPTION_LABELS,
)

ABS_TOLERANCE = Fraction(1, 10**6)
REL_TOLERANCE = Fraction(1, 10**4)

_NON_ALNUM_SPACE_RE = re.compile(r"[^A-Za-z0-9 ]")
_WS_RUN_RE = re.compile(r"\s+")

# A number with optional sign, commas in the integer part, decimals, and an
# exponent: "-1,234.5e-2". Fraction syntax covers "a/b" separately.
_NUMBER_RE = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?(?:[eE][-+]?\d+)?")
_SIMPLE_FRACTION_RE = re.compile(r"([-+]?\d+)\s*/\s*(\d+)")


def clean_text(text: str) -> str:
    """Canonical text form: alphanumerics and single spaces, uppercased."""
    stripped = _NON_ALNUM_SPACE_RE.sub("", text)
    return _WS_RUN_RE.sub(" ", stripped).strip().upper()


def parse_numeric(raw: str) -> Fraction:
    """Extract the first number in ``raw`` as an exact rational.

    A trailing percent sign divides by 100. Raises UnnormalizableAnswer when
    no number is present.
    """
    candidate = raw.strip().rstrip(".")
    fraction_match = _SIMPLE_FRACTION_RE.search(candidate)
    number_match = _NUMBER_RE.search(candidate)
    if fraction_match and (
        number_match is None or fraction_match.start() <= number_match.start()
    ):
        numerator, denominator = fraction_match.groups()
        if denominator != "0":
            return Fraction(int(numerator), int(denominator))
    if number_match is None:
        raise UnnormalizableAnswer(f"no number found in {raw!r}")
    literal = number_match.group(0).replace(",", "")
    try:
        value = Fraction(literal)
    except (ValueError, ZeroDivisionError) as exc:
        raise UnnormalizableAnswer(f"cannot parse number {literal!r}") from exc
    rest = candidate[number_match.end():].lstrip()
    if rest.startswith("%") or rest.lower().startswith("percent"):
        value /= 100
    return value


def _normalize_option(raw: str) -> OptionLabel:
    cleaned = clean_text(raw)
    if not cleaned:
        raise UnnormalizableAnswer(f"no option letter in {raw!r}")
    leading = cleaned[0]
    if leading not in VALID_OPTION_LABELS:
        raise UnnormalizableAnswer(
            f"leading character {leading!r} of {raw!r} is not an option letter"
        )
    return OptionLabel(leading)


def normalize_answer(raw: str, kind: QuestionKind) -> NormalizedAnswer:
    """Normalize a raw answer string for its question kind.

    Raises UnnormalizableAnswer when the string has no usable content.
    """
    if not raw or not raw.strip():
        raise UnnormalizableAnswer("empty answer")
    if kind is QuestionKind.MCQA:
        return _normalize_option(raw)
    if kind is QuestionKind.OPEN_NUMERIC:
        return NumericValue(parse_numeric(raw))
    cleaned = clean_text(raw)
    if not cleaned:
        raise UnnormalizableAnswer(f"text answer {raw!r} is empty after cleaning")
    return TextValue(cleaned)


def _as_fraction(value) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


def answers_equal(
    left: NormalizedAnswer,
    right: NormalizedAnswer,
    abs_tol=ABS_TOLERANCE,
    rel_tol=REL_TOLERANCE,
) -> bool:
    """Whether two normalized answers agree. Kinds must match."""
    if isinstance(left, OptionLabel) and isinstance(right, OptionLabel):
        return left.label == right.label
    if isinstance(left, NumericValue) and isinstance(right, NumericValue):
        difference = abs(left.value - right.value)
        bound = max(_as_fraction(abs_tol), _as_fraction(rel_tol) * abs(right.value))
        return difference <= bound
    if isinstance(left, TextValue) and isinstance(right, TextValue):
        return left.text == right.text
    raise KindMismatch(
        f"cannot compare {type(left).__name__} with {type(right).__name__}"
    )


def grade(
    raw_answer: str,
    ground_truth: NormalizedAnswer,
    kind: QuestionKind,
    abs_tol=ABS_TOLERANCE,
    rel_tol=REL_TOLERANCE,
) -> bool:
    """Normalize ``raw_answer`` and compare it with the ground truth."""
    return answers_equal(normalize_answer(raw_answer, kind), ground_truth, abs_tol, rel_tol)


def grade_safe(
    raw_answer: Optional[str],
    ground_truth: NormalizedAnswer,
    kind: QuestionKind,
    abs_tol=ABS_TOLERANCE,
    rel_tol=REL_TOLERANCE,
) -> tuple[bool, list[str]]:
    """Fail-closed grading: anything unparseable counts as incorrect.

    Returns (correct, flags). Flags name what went wrong so a report can
    distinguish a wrong answer from an unusable one.
    """
    if raw_answer is None:
        return False, ["answer-missing"]
    try:
        return grade(raw_answer, ground_truth, kind, abs_tol, rel_tol), []
    except UnnormalizableAnswer:
        return False, ["answer-unnormalizable"]
