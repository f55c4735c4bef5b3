"""Shared domain types: QA instances, answers, decompositions, splits, model refs.

All types are immutable value objects; invariants are enforced at construction
and violations raise ValueError, never pass silently.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

# Literals reserved for the encoder/decoder text formats. Payload text
# (questions, contexts, sub-question steps) must never contain them.
RESERVED_LITERALS: tuple[str, ...] = ("<PARSE>", "<subQ>", "<QUESTION>", "<CONTEXT>")

_REF_RE = re.compile(r"#(\d+)")


def extract_refs(text: str) -> tuple[int, ...]:
    """All #k back-references in `text`, in order of occurrence."""
    return tuple(int(m.group(1)) for m in _REF_RE.finditer(text))


@dataclass(frozen=True, slots=True)
class SubQuestion:
    """One decomposition step; `refs` is derived from the #k tokens in `text`."""

    text: str
    refs: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        if not self.text or self.text != self.text.strip():
            raise ValueError(f"sub-question text must be non-empty and trimmed: {self.text!r}")
        for literal in RESERVED_LITERALS:
            if literal in self.text:
                raise ValueError(f"sub-question text contains reserved literal {literal!r}")
        object.__setattr__(self, "refs", extract_refs(self.text))


@dataclass(frozen=True, slots=True)
class Decomposition:
    """Ordered sub-questions with #k back-references to earlier steps.

    `predicted` marks model-generated pseudo-labels (as opposed to gold
    annotations); `ill_formed` marks decoder output whose references violate
    the back-reference rule but which is retained anyway.
    """

    steps: tuple[SubQuestion, ...]
    predicted: bool = False
    ill_formed: bool = False

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("decomposition requires at least one step")
        if not self.ill_formed:
            for position, step in enumerate(self.steps, start=1):
                bad = [k for k in step.refs if not 1 <= k < position]
                if bad:
                    raise ValueError(
                        f"step {position} references {bad}; only earlier steps (1..{position - 1}) are allowed"
                    )

    @classmethod
    def from_texts(
        cls, texts: Iterable[str], *, predicted: bool = False, ill_formed: bool = False
    ) -> "Decomposition":
        return cls(tuple(SubQuestion(t) for t in texts), predicted=predicted, ill_formed=ill_formed)

    def step_texts(self) -> tuple[str, ...]:
        return tuple(step.text for step in self.steps)

    def as_predicted(self) -> "Decomposition":
        return replace(self, predicted=True)


class AnswerKind(str, Enum):
    NUMBER = "number"
    SPANS = "spans"
    DATE = "date"


@dataclass(frozen=True, slots=True)
class DropAnswer:
    """A typed gold answer as released in DROP: number, span set, or date.

    Numbers stay as text until metric time; canonicalization (decimals,
    percent strings) belongs to the metric, not the data model.
    """

    kind: AnswerKind
    number: str = ""
    spans: tuple[str, ...] = ()
    date: tuple[str, str, str] = ("", "", "")

    def __post_init__(self) -> None:
        populated = {
            AnswerKind.NUMBER: bool(self.number),
            AnswerKind.SPANS: bool(self.spans),
            AnswerKind.DATE: any(part for part in self.date),
        }
        if not populated[self.kind]:
            raise ValueError(f"answer of kind {self.kind.value} has no {self.kind.value} payload")
        others = [k for k, filled in populated.items() if filled and k is not self.kind]
        if others:
            raise ValueError(f"answer of kind {self.kind.value} also populates {[k.value for k in others]}")

    @classmethod
    def from_number(cls, number: str) -> "DropAnswer":
        return cls(AnswerKind.NUMBER, number=number)

    @classmethod
    def from_spans(cls, spans: Iterable[str]) -> "DropAnswer":
        return cls(AnswerKind.SPANS, spans=tuple(spans))

    @classmethod
    def from_date(cls, day: str = "", month: str = "", year: str = "") -> "DropAnswer":
        return cls(AnswerKind.DATE, date=(day, month, year))

    def as_text(self) -> str:
        """Render for generative targets: multi-span joined with '; ',
        dates as the non-empty parts of day month year."""
        if self.kind is AnswerKind.NUMBER:
            return self.number
        if self.kind is AnswerKind.SPANS:
            return "; ".join(self.spans)
        return " ".join(part for part in self.date if part)


@dataclass(frozen=True, slots=True)
class QAInstance:
    """One (question, context, answers[, decomposition]) record keyed by DROP query id."""

    id: str
    passage_id: str
    question: str
    context: str
    gold_answers: tuple[DropAnswer, ...]
    gold_decomposition: Optional[Decomposition] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("instance id must be non-empty")
        if not self.question.strip():
            raise ValueError(f"instance {self.id}: question is empty")
        if not self.context.strip():
            raise ValueError(f"instance {self.id}: context is empty")
        if not self.gold_answers:
            raise ValueError(f"instance {self.id}: at least one gold answer required")

    def with_decomposition(self, decomposition: Decomposition) -> "QAInstance":
        return replace(self, gold_decomposition=decomposition)

    @property
    def primary_answer(self) -> DropAnswer:
        return self.gold_answers[0]


class SplitName(str, Enum):
    D1_TRAIN = "d1_train"
    D1_TEST = "d1_test"
    D2_TRAIN = "d2_train"
    D2_TEST = "d2_test"
    D_WEAK = "d_weak"
    D_ITER = "d_iter"


@dataclass(frozen=True, slots=True)
class DatasetSplit:
    """A named list of instances with per-split decomposition presence rules."""

    name: SplitName
    instances: tuple[QAInstance, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise ValueError(f"duplicate instance id {inst.id!r} in split {self.name.value}")
            seen.add(inst.id)
        if self.name in (SplitName.D2_TRAIN, SplitName.D2_TEST):
            for inst in self.instances:
                if inst.gold_decomposition is None:
                    raise ValueError(f"{self.name.value} requires a gold decomposition (instance {inst.id})")
                if inst.gold_decomposition.predicted:
                    raise ValueError(f"{self.name.value} must carry gold, not predicted, decompositions ({inst.id})")
        elif self.name is SplitName.D_WEAK:
            for inst in self.instances:
                if inst.gold_decomposition is not None:
                    raise ValueError(f"d_weak instance {inst.id} must not carry a decomposition")
        elif self.name is SplitName.D_ITER:
            for inst in self.instances:
                if inst.gold_decomposition is None or not inst.gold_decomposition.predicted:
                    raise ValueError(f"d_iter instance {inst.id} must carry a predicted decomposition")

    def __len__(self) -> int:
        return len(self.instances)

    def ids(self) -> tuple[str, ...]:
        return tuple(inst.id for inst in self.instances)

    def by_id(self) -> dict[str, QAInstance]:
        return {inst.id: inst for inst in self.instances}


@dataclass(frozen=True, slots=True)
class ModelRef:
    """Opaque handle to a model living behind a backend; lineage lists ancestor handles oldest-first."""

    handle: str
    backend_id: str
    lineage: tuple[str, ...] = ()

    def child(self, handle: str) -> "ModelRef":
        return ModelRef(handle=handle, backend_id=self.backend_id, lineage=self.lineage + (self.handle,))


@dataclass(frozen=True, slots=True)
class Prediction:
    instance_id: str
    answer_text: str
    decomposition: Optional[Decomposition] = None
    raw_decoder_output: str = ""


@dataclass(frozen=True, slots=True)
class SplitStats:
    n: int
    decomposed: int
    by_answer_kind: dict[str, int]


def dataset_stats(split: DatasetSplit) -> SplitStats:
    """Exact instance/decomposition counts plus a per-answer-kind breakdown
    (classified by the primary gold answer)."""
    kinds = Counter(inst.primary_answer.kind.value for inst in split.instances)
    return SplitStats(
        n=len(split.instances),
        decomposed=sum(1 for inst in split.instances if inst.gold_decomposition is not None),
        by_answer_kind={kind.value: kinds.get(kind.value, 0) for kind in AnswerKind},
    )
