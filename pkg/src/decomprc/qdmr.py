"""Text codecs between domain objects and the seq2seq encoder/decoder formats.

Decomposer direction:   "<PARSE> question"  ->  "<subQ> step1 <subQ> step2 ..."
Reader direction:       "<QUESTION> question <subQ> step1 ... <CONTEXT> passage"

Special tokens are atomic, space-separated literals; payloads containing a
reserved literal are rejected rather than escaped (no DROP/Break text contains
them). Decoding is total: output without a single usable fragment comes back
as a DecodeFallback carrying the raw text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

from .core import RESERVED_LITERALS, Decomposition, SubQuestion


class SpecialToken(Enum):
    PARSE = "<PARSE>"
    SUBQ = "<subQ>"
    QUESTION = "<QUESTION>"
    CONTEXT = "<CONTEXT>"


class EncodeError(ValueError):
    """Payload unfit for encoding (empty, reserved literal, or over budget)."""


@dataclass(frozen=True, slots=True)
class DecodeFallback:
    """Decoder output with no parseable sub-question fragments, kept opaque."""

    raw: str


_LITERAL_RE = re.compile("|".join(re.escape(lit) for lit in RESERVED_LITERALS))

TokenCounter = Callable[[str], int]


def whitespace_token_count(text: str) -> int:
    """Token count under plain whitespace tokenization (the mock backend's rule)."""
    return len(text.split())


def _check_payload(text: str, what: str) -> str:
    if not text.strip():
        raise EncodeError(f"{what} is empty")
    hit = _LITERAL_RE.search(text)
    if hit:
        raise EncodeError(f"{what} contains reserved literal {hit.group(0)!r}")
    return text


def _strip_literals(text: str) -> str:
    return " ".join(_LITERAL_RE.sub(" ", text).split())


def fallback_step_text(raw: str) -> str:
    """Opaque step text salvaged from unparseable decoder output; may be empty."""
    return _strip_literals(raw)


def encode_decomposer_input(question: str) -> str:
    _check_payload(question, "question")
    return f"{SpecialToken.PARSE.value} {question}"


def encode_decomposer_target(decomposition: Decomposition) -> str:
    return " ".join(f"{SpecialToken.SUBQ.value} {step.text}" for step in decomposition.steps)


def decode_decomposition(raw: str) -> Union[Decomposition, DecodeFallback]:
    """Parse decoder output back into a decomposition.

    Splits on <subQ>, trims fragments, drops empty ones. Fragments with
    forward/self references, or containing stray special-token literals
    (which are stripped), are retained but flag the result ill_formed.
    """
    fragments = [f.strip() for f in raw.split(SpecialToken.SUBQ.value)]
    ill_formed = False
    texts: list[str] = []
    for fragment in fragments:
        if not fragment:
            continue
        if _LITERAL_RE.search(fragment):
            fragment = _strip_literals(fragment)
            ill_formed = True
            if not fragment:
                continue
        texts.append(fragment)
    if not texts:
        return DecodeFallback(raw)
    steps = tuple(SubQuestion(t) for t in texts)
    for position, step in enumerate(steps, start=1):
        if any(not 1 <= k < position for k in step.refs):
            ill_formed = True
    return Decomposition(steps, ill_formed=ill_formed)


def encode_rc_input(
    question: str,
    decomposition: Union[Decomposition, DecodeFallback, None],
    context: str,
    budget: int,
    count_tokens: TokenCounter = whitespace_token_count,
) -> str:
    """Build the reader's source text, truncating the context tail to fit `budget`.

    The question and sub-question section are never truncated; if they alone
    exceed the budget this raises. Context whitespace is normalized to single
    spaces so that truncation removes whole words from the tail. `budget` is
    measured with `count_tokens`, normally the serving backend's tokenizer.
    """
    if budget <= 0:
        raise EncodeError(f"budget must be positive, got {budget}")
    _check_payload(question, "question")
    _check_payload(context, "context")

    parts = [SpecialToken.QUESTION.value, question]
    if isinstance(decomposition, Decomposition):
        for step in decomposition.steps:
            parts.extend((SpecialToken.SUBQ.value, step.text))
    elif isinstance(decomposition, DecodeFallback):
        opaque = _strip_literals(decomposition.raw)
        if opaque:
            parts.extend((SpecialToken.SUBQ.value, opaque))
    parts.append(SpecialToken.CONTEXT.value)
    head = " ".join(parts)

    head_len = count_tokens(head)
    if head_len > budget:
        raise EncodeError(
            f"question and sub-questions need {head_len} tokens, over the budget of {budget}"
        )

    words = context.split()

    def fits(n_words: int) -> bool:
        if n_words == 0:
            return True
        return count_tokens(f"{head} {' '.join(words[:n_words])}") <= budget

    lo, hi = 0, len(words)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    # Guard against non-monotone tokenizers: back off until it truly fits.
    while lo > 0 and not fits(lo):
        lo -= 1

    if lo == 0:
        return head
    return f"{head} {' '.join(words[:lo])}"
