"""Dataset loading.

One JSON object per line with fields exactly
{id, subject, category, question, context?, options?, ground_truth, kind};
options entries are {label, text}. Anything else is rejected with a
diagnostic naming the offending field, before any model call is made.
"""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Iterable

from .grading import clean_text
from .types import (
    Category,
    DatasetError,
    NumericValue,
    Option,
    OptionLabel,
    Question,
    QuestionKind,
    TextValue,
    UnnormalizableAnswer,
)

REQUIRED_FIELDS = {"id", "subject", "category", "question", "ground_truth", "kind"}
OPTIONAL_FIELDS = {"context", "options"}
ALLOWED_FIELDS = REQUIRED_FIELDS | OPTIONAL_FIELDS
OPTION_FIELDS = {"label", "text"}


def _ground_truth_from_json(value, kind: QuestionKind, qid: str):
    if kind is QuestionKind.MCQA:
        if not isinstance(value, str):
            raise DatasetError(f"question {qid!r}: MCQA ground_truth must be a string label")
        try:
            return OptionLabel(value.strip().upper())
        except UnnormalizableAnswer as exc:
            raise DatasetError(f"question {qid!r}: {exc}") from None
    if kind is QuestionKind.OPEN_NUMERIC:
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise DatasetError(f"question {qid!r}: numeric ground_truth must be a number or string")
        try:
            return NumericValue(Fraction(str(value)))
        except (ValueError, ZeroDivisionError):
            raise DatasetError(f"question {qid!r}: cannot parse numeric ground_truth {value!r}") from None
    if not isinstance(value, str):
        raise DatasetError(f"question {qid!r}: text ground_truth must be a string")
    cleaned = clean_text(value)
    if not cleaned:
        raise DatasetError(f"question {qid!r}: text ground_truth is empty after cleaning")
    return TextValue(cleaned)


def question_from_record(record: dict, line_no: int = 0) -> Question:
    where = f"line {line_no}" if line_no else "record"
    if not isinstance(record, dict):
        raise DatasetError(f"{where}: expected a JSON object")

    unknown = sorted(set(record) - ALLOWED_FIELDS)
    if unknown:
        raise DatasetError(f"{where}: unknown field {unknown[0]!r}")
    missing = sorted(REQUIRED_FIELDS - set(record))
    if missing:
        raise DatasetError(f"{where}: missing field {missing[0]!r}")

    qid = record["id"]
    if not isinstance(qid, str) or not qid:
        raise DatasetError(f"{where}: field 'id' must be a non-empty string")
    for field in ("subject", "question"):
        if not isinstance(record[field], str) or not record[field]:
            raise DatasetError(f"question {qid!r}: field {field!r} must be a non-empty string")

    try:
        category = Category(record["category"])
    except ValueError:
        raise DatasetError(
            f"question {qid!r}: field 'category' must be one of "
            f"{[c.value for c in Category]}, got {record['category']!r}"
        ) from None
    try:
        kind = QuestionKind(record["kind"])
    except ValueError:
        raise DatasetError(
            f"question {qid!r}: field 'kind' must be one of "
            f"{[k.value for k in QuestionKind]}, got {record['kind']!r}"
        ) from None

    context = record.get("context")
    if context is not None and not isinstance(context, str):
        raise DatasetError(f"question {qid!r}: field 'context' must be a string")

    options = None
    if record.get("options") is not None:
        raw_options = record["options"]
        if not isinstance(raw_options, list):
            raise DatasetError(f"question {qid!r}: field 'options' must be an array")
        parsed = []
        for position, entry in enumerate(raw_options):
            if not isinstance(entry, dict):
                raise DatasetError(f"question {qid!r}: options[{position}] must be an object")
            extra = sorted(set(entry) - OPTION_FIELDS)
            if extra:
                raise DatasetError(f"question {qid!r}: options[{position}] unknown field {extra[0]!r}")
            if set(entry) != OPTION_FIELDS:
                lacking = sorted(OPTION_FIELDS - set(entry))
                raise DatasetError(f"question {qid!r}: options[{position}] missing field {lacking[0]!r}")
            if not isinstance(entry["label"], str) or not isinstance(entry["text"], str):
                raise DatasetError(f"question {qid!r}: options[{position}] label and text must be strings")
            parsed.append(Option(label=entry["label"], text=entry["text"]))
        options = tuple(parsed)

    ground_truth = _ground_truth_from_json(record["ground_truth"], kind, qid)
    return Question(
        id=qid,
        subject=record["subject"],
        category=category,
        text=record["question"],
        ground_truth=ground_truth,
        kind=kind,
        context=context,
        options=options,
    )


def load_dataset(path: str | Path) -> list[Question]:
    """Load and validate a JSONL dataset. Duplicate ids are rejected."""
    questions: list[Question] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            question = question_from_record(record, line_no)
            if question.id in seen:
                raise DatasetError(f"line {line_no}: duplicate question id {question.id!r}")
            seen.add(question.id)
            questions.append(question)
    if not questions:
        raise DatasetError(f"{path}: dataset is empty")
    return questions


def write_dataset(path: str | Path, questions: Iterable[Question]) -> None:
    """Serialize questions back to the JSONL schema (test-fixture helper)."""
    with open(path, "w", encoding="utf-8") as handle:
        for q in questions:
            record: dict = {
                "id": q.id,
                "subject": q.subject,
                "category": q.category.value,
                "question": q.text,
                "ground_truth": q.ground_truth.as_text(),
                "kind": q.kind.value,
            }
            if q.context is not None:
                record["context"] = q.context
            if q.options is not None:
                record["options"] = [{"label": o.label, "text": o.text} for o in q.options]
            handle.write(json.dumps(record, sort_keys=True) + "\n")
