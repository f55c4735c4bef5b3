"""Readers for the two source corpora and the join that produces training splits.

DROP ships as JSON keyed by passage id; each passage holds a list of QA pairs
with one answer object plus optional validated alternates. Decomposition
annotations ship as CSV rows keyed by a prefixed question id; only rows from
the DROP partition are used, and ids align after stripping the partition/split
prefix. The join yields the annotated subset (gold decompositions attached)
and the weakly-supervised remainder (no decompositions).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import (
    AnswerKind,
    DatasetSplit,
    Decomposition,
    DropAnswer,
    QAInstance,
    SplitName,
)

STEP_SEPARATOR = ";"
_BREAK_ID_PREFIX = "DROP"


@dataclass(frozen=True, slots=True)
class Reject:
    """A skipped input record and the reason it was skipped."""

    id: str
    reason: str

    def to_json(self) -> dict:
        return {"id": self.id, "reason": self.reason}


@dataclass(frozen=True, slots=True)
class BreakRow:
    question_id: str
    question_text: str
    decomposition: Decomposition


@dataclass(frozen=True, slots=True)
class AlignReport:
    """Bookkeeping from joining decomposition rows onto a QA split."""

    matched: int
    unmatched: tuple[str, ...]
    duplicates: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "matched": self.matched,
            "unmatched": list(self.unmatched),
            "duplicates": list(self.duplicates),
        }


def _answer_from_json(obj: dict) -> DropAnswer | None:
    """Convert a raw DROP answer object; None when every field is empty."""
    number = str(obj.get("number", "")).strip()
    if number:
        return DropAnswer.from_number(number)
    spans = [s for s in obj.get("spans", []) if s.strip()]
    if spans:
        return DropAnswer.from_spans(spans)
    date = obj.get("date", {}) or {}
    day = str(date.get("day", "")).strip()
    month = str(date.get("month", "")).strip()
    year = str(date.get("year", "")).strip()
    if day or month or year:
        return DropAnswer.from_date(day, month, year)
    return None


def parse_drop(path: str | Path, name: SplitName) -> tuple[DatasetSplit, list[Reject]]:
    """Read a DROP JSON file into a split sorted by question id.

    QA pairs whose answer and validated alternates are all empty are rejected
    rather than silently included; degenerate validated alternates on an
    otherwise-answerable pair are just dropped.
    """
    import json

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)

    instances: list[QAInstance] = []
    rejects: list[Reject] = []
    for passage_id, passage_obj in raw.items():
        context = passage_obj["passage"]
        for qa in passage_obj.get("qa_pairs", []):
            qid = qa["query_id"]
            golds: list[DropAnswer] = []
            primary = _answer_from_json(qa.get("answer", {}))
            if primary is not None:
                golds.append(primary)
            for validated in qa.get("validated_answers", []):
                alt = _answer_from_json(validated)
                if alt is not None:
                    golds.append(alt)
            if not golds:
                rejects.append(Reject(qid, "no non-empty answer"))
                continue
            instances.append(
                QAInstance(
                    id=qid,
                    passage_id=passage_id,
                    question=qa["question"],
                    context=context,
                    gold_answers=tuple(golds),
                )
            )
    instances.sort(key=lambda inst: inst.id)
    return DatasetSplit(name=name, instances=tuple(instances)), rejects


def _strip_break_prefix(question_id: str) -> str:
    # "DROP_train_<qid>" / "DROP_dev_<qid>" -> "<qid>"
    return question_id.split("_", 2)[2]


def parse_break(path: str | Path, delimiter: str = ",") -> tuple[list[BreakRow], list[Reject]]:
    """Read decomposition CSV rows, keeping only the DROP partition.

    Step lists are split on ';' with per-step trimming; empty fragments are
    dropped. Rows whose steps reference a later or own step are rejected.
    """
    rows: list[BreakRow] = []
    rejects: list[Reject] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        for record in reader:
            question_id = record["question_id"]
            if question_id.split("_", 1)[0] != _BREAK_ID_PREFIX:
                continue
            steps = [s.strip() for s in record["decomposition"].split(STEP_SEPARATOR)]
            steps = [s for s in steps if s]
            if not steps:
                rejects.append(Reject(question_id, "empty decomposition"))
                continue
            try:
                z = Decomposition.from_texts(steps)
            except ValueError as exc:
                rejects.append(Reject(question_id, str(exc)))
                continue
            rows.append(BreakRow(question_id, record["question_text"], z))
    return rows, rejects


def align(
    qa_split: DatasetSplit, rows: Sequence[BreakRow]
) -> tuple[DatasetSplit, DatasetSplit, AlignReport]:
    """Join decomposition rows onto a QA split.

    Returns (annotated, weak, report): the annotated split carries gold
    decompositions; the weak split is every remaining instance. Rows whose
    stripped id has no QA instance are reported unmatched; repeated ids keep
    the first row and report the rest as duplicates.
    """
    by_qid: dict[str, BreakRow] = {}
    duplicates: list[str] = []
    for row in rows:
        qid = _strip_break_prefix(row.question_id)
        if qid in by_qid:
            duplicates.append(row.question_id)
            continue
        by_qid[qid] = row

    annotated: list[QAInstance] = []
    weak: list[QAInstance] = []
    matched_qids: set[str] = set()
    for inst in qa_split.instances:
        row = by_qid.get(inst.id)
        if row is None:
            weak.append(inst)
        else:
            matched_qids.add(inst.id)
            annotated.append(inst.with_decomposition(row.decomposition))

    unmatched = tuple(
        row.question_id for row in rows if _strip_break_prefix(row.question_id) not in matched_qids
        and row.question_id not in duplicates
    )
    annotated_name = SplitName.D2_TRAIN if qa_split.name is SplitName.D1_TRAIN else SplitName.D2_TEST
    report = AlignReport(matched=len(annotated), unmatched=unmatched, duplicates=tuple(duplicates))
    return (
        DatasetSplit(name=annotated_name, instances=tuple(annotated)),
        DatasetSplit(name=SplitName.D_WEAK, instances=tuple(weak)),
        report,
    )
