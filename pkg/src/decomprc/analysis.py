"""Train/test sub-question n-gram overlap analysis.

Test instances are bucketed by the fraction of their sub-questions' distinct
n-grams (n = 1, 2, 3) that appear anywhere in the training sub-questions, then
scored per bucket. Reading: distinct n-gram types, not token occurrences;
sub-question texts are lowercased and whitespace-tokenized, n-grams never
cross step boundaries, and `#k` reference tokens count literally. Instances
whose decomposition yields no n-grams for a given n are excluded from that
n's buckets and reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .core import DatasetSplit, Decomposition, QAInstance
from .metrics import drop_em, drop_f1

NS = (1, 2, 3)

INTERVAL_LABELS = ("[0%,25%)", "[25%,50%)", "[50%,75%)", "[75%,100%]")

_DISTINCT_TYPE_NOTE = (
    "overlap = distinct test n-gram types found in the training sub-questions / "
    "distinct test n-gram types (per instance; steps tokenized independently)"
)


class NoNgramsError(ValueError):
    """The decomposition yields no n-grams at this n (all steps too short)."""


def decomposition_ngrams(decomposition: Decomposition, n: int) -> frozenset[tuple[str, ...]]:
    """Distinct n-grams over the decomposition's steps, lowercased, one step at a time."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grams: set[tuple[str, ...]] = set()
    for step in decomposition.steps:
        tokens = step.text.lower().split()
        grams.update(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return frozenset(grams)


def build_train_ngrams(train_split: DatasetSplit, n: int) -> frozenset[tuple[str, ...]]:
    grams: set[tuple[str, ...]] = set()
    for inst in train_split.instances:
        if inst.gold_decomposition is None:
            raise ValueError(f"training instance {inst.id} has no decomposition")
        grams.update(decomposition_ngrams(inst.gold_decomposition, n))
    return frozenset(grams)


def overlap_fraction(
    test_decomposition: Decomposition, train_ngrams: frozenset[tuple[str, ...]], n: int
) -> float:
    test_grams = decomposition_ngrams(test_decomposition, n)
    if not test_grams:
        raise NoNgramsError(f"decomposition yields no {n}-grams")
    return len(test_grams & train_ngrams) / len(test_grams)


def bucket_index(fraction: float) -> int:
    """Boundary rule: 0.25/0.50/0.75 go to the upper bucket, 1.0 to the last."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction out of range: {fraction}")
    if fraction < 0.25:
        return 0
    if fraction < 0.50:
        return 1
    if fraction < 0.75:
        return 2
    return 3


@dataclass(frozen=True, slots=True)
class OverlapBucket:
    n: int
    interval: str
    member_ids: tuple[str, ...]


def bucketize(
    test_split: DatasetSplit, train_split: DatasetSplit, n: int
) -> tuple[list[OverlapBucket], tuple[str, ...]]:
    """Partition test ids into the four overlap intervals; returns (buckets,
    excluded ids). Excluded = instances with zero n-grams at this n."""
    train_ngrams = build_train_ngrams(train_split, n)
    members: list[list[str]] = [[], [], [], []]
    excluded: list[str] = []
    for inst in test_split.instances:
        if inst.gold_decomposition is None:
            raise ValueError(f"test instance {inst.id} has no decomposition")
        try:
            fraction = overlap_fraction(inst.gold_decomposition, train_ngrams, n)
        except NoNgramsError:
            excluded.append(inst.id)
            continue
        members[bucket_index(fraction)].append(inst.id)
    buckets = [
        OverlapBucket(n=n, interval=label, member_ids=tuple(ids))
        for label, ids in zip(INTERVAL_LABELS, members)
    ]
    return buckets, tuple(excluded)


@dataclass(frozen=True, slots=True)
class BucketScore:
    n: int
    interval: str
    count: int
    em: Optional[float]
    f1: Optional[float]

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "interval": self.interval,
            "count": self.count,
            "em": self.em,
            "f1": self.f1,
        }


def per_bucket_scores(
    buckets: Sequence[OverlapBucket],
    predictions: Mapping[str, str],
    instances_by_id: Mapping[str, QAInstance],
) -> list[BucketScore]:
    """Aggregate EM/F1 inside each bucket; empty buckets score None (rendered "-")."""
    scores = []
    for bucket in buckets:
        if not bucket.member_ids:
            scores.append(BucketScore(bucket.n, bucket.interval, 0, None, None))
            continue
        em_total = 0
        f1_total = 0.0
        for instance_id in bucket.member_ids:
            if instance_id not in predictions:
                raise KeyError(f"missing prediction for instance {instance_id}")
            golds = instances_by_id[instance_id].gold_answers
            em_total += drop_em(predictions[instance_id], golds)
            f1_total += drop_f1(predictions[instance_id], golds)
        count = len(bucket.member_ids)
        scores.append(
            BucketScore(
                bucket.n,
                bucket.interval,
                count,
                100.0 * em_total / count,
                100.0 * f1_total / count,
            )
        )
    return scores


@dataclass(frozen=True, slots=True)
class AnalysisReport:
    note: str
    rows: tuple[BucketScore, ...]
    excluded: dict

    def to_json(self) -> dict:
        return {
            "note": self.note,
            "rows": [row.to_json() for row in self.rows],
            "excluded": self.excluded,
        }


def analyze(
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    predictions: Optional[Mapping[str, str]] = None,
) -> AnalysisReport:
    """Full overlap analysis for n = 1, 2, 3. Without predictions the report
    carries bucket counts only."""
    by_id = test_split.by_id()
    rows: list[BucketScore] = []
    excluded: dict[str, list[str]] = {}
    for n in NS:
        buckets, excluded_ids = bucketize(test_split, train_split, n)
        excluded[str(n)] = list(excluded_ids)
        if predictions is None:
            rows.extend(
                BucketScore(b.n, b.interval, len(b.member_ids), None, None) for b in buckets
            )
        else:
            rows.extend(per_bucket_scores(buckets, predictions, by_id))
    return AnalysisReport(note=_DISTINCT_TYPE_NOTE, rows=tuple(rows), excluded=excluded)


def _cell(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.1f}"


def render_table(report: AnalysisReport) -> str:
    """Aligned text table: one row per n, EM/F1 (or count) per interval."""
    lines = [f"# {report.note}"]
    header = ["n"] + list(INTERVAL_LABELS)
    widths = [max(12, len(h) + 2) for h in header]
    widths[0] = 4

    def fmt_row(cells: Sequence[str]) -> str:
        return "".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip()

    lines.append(fmt_row(header))
    for n in NS:
        row_scores = [row for row in report.rows if row.n == n]
        cells = [str(n)]
        for score in row_scores:
            if score.count == 0:
                cells.append("-")
            elif score.em is None:
                cells.append(f"n={score.count}")
            else:
                cells.append(f"{_cell(score.em)}/{_cell(score.f1)} (n={score.count})")
        lines.append(fmt_row(cells))
        if report.excluded.get(str(n)):
            lines.append(f"  excluded ({n}-grams): {len(report.excluded[str(n)])} instance(s)")
    return "\n".join(lines) + "\n"
