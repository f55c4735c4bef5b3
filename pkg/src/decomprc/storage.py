"""JSON/JSONL persistence for domain objects.

Every serializer round-trips through the validating constructors in `core`,
so a file that loads is a file whose invariants hold. Splits are stored as one
instance per JSONL line; predictions and decompositions inline as nested objects.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .core import (
    AnswerKind,
    Decomposition,
    DropAnswer,
    Prediction,
    QAInstance,
    DatasetSplit,
    SplitName,
    SubQuestion,
)


def answer_to_json(answer: DropAnswer) -> dict:
    out: dict = {"kind": answer.kind.value}
    if answer.kind is AnswerKind.NUMBER:
        out["number"] = answer.number
    elif answer.kind is AnswerKind.SPANS:
        out["spans"] = list(answer.spans)
    else:
        out["date"] = {"day": answer.date[0], "month": answer.date[1], "year": answer.date[2]}
    return out


def answer_from_json(obj: dict) -> DropAnswer:
    kind = AnswerKind(obj["kind"])
    if kind is AnswerKind.NUMBER:
        return DropAnswer.from_number(obj["number"])
    if kind is AnswerKind.SPANS:
        return DropAnswer.from_spans(obj["spans"])
    date = obj["date"]
    return DropAnswer.from_date(date.get("day", ""), date.get("month", ""), date.get("year", ""))


def decomposition_to_json(z: Decomposition) -> dict:
    return {
        "steps": [s.text for s in z.steps],
        "predicted": z.predicted,
        "ill_formed": z.ill_formed,
    }


def decomposition_from_json(obj: dict) -> Decomposition:
    return Decomposition.from_texts(
        obj["steps"],
        predicted=obj.get("predicted", False),
        ill_formed=obj.get("ill_formed", False),
    )


def instance_to_json(inst: QAInstance) -> dict:
    out = {
        "id": inst.id,
        "passage_id": inst.passage_id,
        "question": inst.question,
        "context": inst.context,
        "gold_answers": [answer_to_json(a) for a in inst.gold_answers],
    }
    if inst.gold_decomposition is not None:
        out["gold_decomposition"] = decomposition_to_json(inst.gold_decomposition)
    return out


def instance_from_json(obj: dict) -> QAInstance:
    z = obj.get("gold_decomposition")
    return QAInstance(
        id=obj["id"],
        passage_id=obj["passage_id"],
        question=obj["question"],
        context=obj["context"],
        gold_answers=tuple(answer_from_json(a) for a in obj["gold_answers"]),
        gold_decomposition=decomposition_from_json(z) if z is not None else None,
    )


def prediction_to_json(pred: Prediction) -> dict:
    out: dict = {"instance_id": pred.instance_id, "answer_text": pred.answer_text}
    if pred.decomposition is not None:
        out["decomposition"] = decomposition_to_json(pred.decomposition)
    if pred.raw_decoder_output:
        out["raw_decoder_output"] = pred.raw_decoder_output
    return out


def prediction_from_json(obj: dict) -> Prediction:
    z = obj.get("decomposition")
    return Prediction(
        instance_id=obj["instance_id"],
        answer_text=obj["answer_text"],
        decomposition=decomposition_from_json(z) if z is not None else None,
        raw_decoder_output=obj.get("raw_decoder_output", ""),
    )


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def append_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def save_split(split: DatasetSplit, directory: str | Path) -> Path:
    """Write a split as <name>.jsonl under `directory`; returns the file path."""
    directory = Path(directory)
    path = directory / f"{split.name.value}.jsonl"
    write_jsonl(path, (instance_to_json(inst) for inst in split.instances))
    return path


def load_split(path: str | Path, name: SplitName | None = None) -> DatasetSplit:
    """Load a split from JSONL. The split name defaults to the file stem."""
    path = Path(path)
    if name is None:
        name = SplitName(path.stem)
    instances = tuple(instance_from_json(obj) for obj in read_jsonl(path))
    return DatasetSplit(name=name, instances=instances)


def load_json(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def dump_json(obj: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
