"""Evaluation mathematics: DROP-style EM/F1, corpus BLEU-4, and Rouge-1/2/L.

The EM/F1 pair follows the official DROP evaluator's semantics exactly
(verified against a frozen 50-case oracle suite): per-token normalization with
numeric canonicalization, token-set bags, a numeric gate on span pairs, optimal
one-to-one span alignment, per-instance F1 rounded to two decimals, and a max
over gold candidates. Predictions are split into spans on "; ", mirroring the
trainer's multi-span join rule.

BLEU is corpus-level BLEU-4 without smoothing (any zero n-gram precision gives
0); Rouge scores are per-pair F-measures averaged over the corpus. Both
tokenize on whitespace, case-sensitive, so special-token placement counts.
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from scipy.optimize import linear_sum_assignment

from .core import AnswerKind, Decomposition, DropAnswer, QAInstance
from .qdmr import encode_decomposer_target

SPAN_SEPARATOR = "; "

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _normalize_token(token: str) -> str:
    token = token.lower()
    # Punctuation survives only inside tokens that already parse as numbers,
    # so "94.04" keeps its decimal point while "94.04%" collapses to "9404".
    if not _is_number(token):
        token = "".join(ch for ch in token if ch not in _PUNCT)
    if _is_number(token):
        token = str(float(token))
    token = _ARTICLE_RE.sub(" ", token)
    return " ".join(token.split())


def normalize_span(text: str) -> str:
    """Normalize one answer span: lowercase, strip punctuation and articles,
    canonicalize numeric tokens, collapse whitespace. Splits on spaces and hyphens."""
    parts = [_normalize_token(tok) for tok in re.split(" |-", text)]
    return " ".join(p for p in parts if p.strip()).strip()


def drop_normalize(text: str) -> list[set[str]]:
    """Token bags (sets) for each '; '-separated span of a prediction string."""
    if not text:
        return []
    return [set(normalize_span(span).split()) for span in text.split(SPAN_SEPARATOR)]


def gold_answer_spans(answer: DropAnswer) -> list[str]:
    """Raw gold spans as the official evaluator sees them."""
    if answer.kind is AnswerKind.NUMBER:
        return [answer.number]
    if answer.kind is AnswerKind.SPANS:
        return list(answer.spans)
    return [" ".join(part for part in answer.date if part)]


def _spans_of(text: str) -> list[str]:
    return text.split(SPAN_SEPARATOR)


def _numbers_in(bag: set[str]) -> set[str]:
    return {tok for tok in bag if _is_number(tok)}


def _bag_f1(pred_bag: set[str], gold_bag: set[str]) -> float:
    overlap = len(pred_bag & gold_bag)
    precision = overlap / len(pred_bag) if pred_bag else 1.0
    recall = overlap / len(gold_bag) if gold_bag else 1.0
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _aligned_f1(pred_spans: list[str], gold_spans: list[str]) -> float:
    pred_bags = [set(normalize_span(s).split()) for s in pred_spans]
    gold_bags = [set(normalize_span(s).split()) for s in gold_spans]
    scores = [[0.0] * len(pred_bags) for _ in gold_bags]
    for gi, gold_bag in enumerate(gold_bags):
        gold_numbers = _numbers_in(gold_bag)
        for pi, pred_bag in enumerate(pred_bags):
            # Numeric gate: when the gold span carries numbers, the pair only
            # scores if at least one of them appears in the prediction.
            if gold_numbers and not gold_numbers & _numbers_in(pred_bag):
                continue
            scores[gi][pi] = _bag_f1(pred_bag, gold_bag)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    total = sum(scores[r][c] for r, c in zip(rows, cols))
    # Round as the official evaluator does, so aggregates agree to the digit.
    return round(total / max(len(pred_bags), len(gold_bags)), 2)


def _em_against(pred_spans: list[str], gold_spans: list[str]) -> int:
    pred_norm = [normalize_span(s) for s in pred_spans]
    gold_norm = [normalize_span(s) for s in gold_spans]
    return int(set(pred_norm) == set(gold_norm) and len(pred_norm) == len(gold_norm))


def drop_em(prediction: str, golds: Sequence[DropAnswer]) -> int:
    """1 iff the predicted spans exactly match some gold candidate after normalization."""
    if not golds:
        raise ValueError("at least one gold answer required")
    pred_spans = _spans_of(prediction)
    return max(_em_against(pred_spans, gold_answer_spans(g)) for g in golds)


def drop_f1(prediction: str, golds: Sequence[DropAnswer]) -> float:
    """Best token-bag F1 over gold candidates, with optimal span alignment
    and the numeric gate."""
    if not golds:
        raise ValueError("at least one gold answer required")
    pred_spans = _spans_of(prediction)
    return max(_aligned_f1(pred_spans, gold_answer_spans(g)) for g in golds)


@dataclass(frozen=True, slots=True)
class InstanceScore:
    id: str
    em: int
    f1: float


@dataclass(frozen=True, slots=True)
class ScoreReport:
    """Aggregate EM/F1 on the 0..100 scale plus the per-instance breakdown."""

    em: float
    f1: float
    per_instance: tuple[InstanceScore, ...]

    def to_json(self) -> dict:
        return {
            "aggregate": {"em": self.em, "f1": self.f1},
            "per_instance": [{"id": s.id, "em": s.em, "f1": s.f1} for s in self.per_instance],
        }


def evaluate_answers(predictions: Mapping[str, str], instances: Sequence[QAInstance]) -> ScoreReport:
    """Score a prediction map against gold instances; every instance must be covered."""
    scores = []
    for inst in instances:
        if inst.id not in predictions:
            raise KeyError(f"missing prediction for instance {inst.id}")
        pred = predictions[inst.id]
        scores.append(InstanceScore(inst.id, drop_em(pred, inst.gold_answers), drop_f1(pred, inst.gold_answers)))
    if not scores:
        return ScoreReport(0.0, 0.0, ())
    return ScoreReport(
        em=100.0 * sum(s.em for s in scores) / len(scores),
        f1=100.0 * sum(s.f1 for s in scores) / len(scores),
        per_instance=tuple(scores),
    )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True, slots=True)
class BleuBreakdown:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float


def corpus_bleu_breakdown(candidates: Sequence[str], references: Sequence[str]) -> BleuBreakdown:
    """Corpus BLEU-4 with clipped modified precisions and brevity penalty;
    no smoothing, so any zero precision zeroes the score."""
    if len(candidates) != len(references):
        raise ValueError(f"length mismatch: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("at least one candidate/reference pair required")
    matched = [0] * 4
    total = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_toks = cand.split()
        ref_toks = ref.split()
        cand_len += len(cand_toks)
        ref_len += len(ref_toks)
        for n in range(1, 5):
            cand_counts = _ngrams(cand_toks, n)
            ref_counts = _ngrams(ref_toks, n)
            matched[n - 1] += sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
            total[n - 1] += sum(cand_counts.values())
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matched, total))
    if cand_len == 0:
        return BleuBreakdown(0.0, precisions, 0.0)
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    if any(p == 0.0 for p in precisions):
        return BleuBreakdown(0.0, precisions, bp)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / 4)
    return BleuBreakdown(100.0 * score, precisions, bp)


def corpus_bleu(candidates: Sequence[str], references: Sequence[str]) -> float:
    return corpus_bleu_breakdown(candidates, references).bleu


def _f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _rouge_n_pair(cand_toks: Sequence[str], ref_toks: Sequence[str], n: int) -> float:
    cand_counts = _ngrams(cand_toks, n)
    ref_counts = _ngrams(ref_toks, n)
    if not cand_counts or not ref_counts:
        return 0.0
    overlap = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    return _f_measure(overlap / sum(cand_counts.values()), overlap / sum(ref_counts.values()))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        curr = [0]
        for j, tok_b in enumerate(b, start=1):
            curr.append(prev[j - 1] + 1 if tok_a == tok_b else max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def _rouge_l_pair(cand_toks: Sequence[str], ref_toks: Sequence[str]) -> float:
    if not cand_toks or not ref_toks:
        return 0.0
    lcs = _lcs_length(cand_toks, ref_toks)
    return _f_measure(lcs / len(cand_toks), lcs / len(ref_toks))


def rouge(candidates: Sequence[str], references: Sequence[str]) -> tuple[float, float, float]:
    """Corpus Rouge-1, Rouge-2, and Rouge-L: mean per-pair F-measure, scaled to 0..100."""
    if len(candidates) != len(references):
        raise ValueError(f"length mismatch: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("at least one candidate/reference pair required")
    r1 = r2 = rl = 0.0
    for cand, ref in zip(candidates, references):
        cand_toks = cand.split()
        ref_toks = ref.split()
        r1 += _rouge_n_pair(cand_toks, ref_toks, 1)
        r2 += _rouge_n_pair(cand_toks, ref_toks, 2)
        rl += _rouge_l_pair(cand_toks, ref_toks)
    n = len(candidates)
    return 100.0 * r1 / n, 100.0 * r2 / n, 100.0 * rl / n


@dataclass(frozen=True, slots=True)
class IntrinsicReport:
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float

    def to_json(self) -> dict:
        return {"bleu": self.bleu, "rouge1": self.rouge1, "rouge2": self.rouge2, "rougeL": self.rougeL}


def evaluate_decomposer(
    predictions: Sequence[Decomposition], golds: Sequence[Decomposition]
) -> IntrinsicReport:
    """Intrinsic decomposition quality; both sides are serialized to the
    decoder target format first so special-token placement is scored too."""
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds")
    cands = [encode_decomposer_target(z) for z in predictions]
    refs = [encode_decomposer_target(z) for z in golds]
    r1, r2, rl = rouge(cands, refs)
    return IntrinsicReport(bleu=corpus_bleu(cands, refs), rouge1=r1, rouge2=r2, rougeL=rl)
