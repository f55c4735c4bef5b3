"""Black-box conformance suite every provider must pass.

The same checks run against the mock, a replayed recording, the HTTP client
pointed at a live service, and the reference service itself. Checks use only
the public Backend interface with fully deterministic request content, so a
recorded conformance run replays cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..core import RESERVED_LITERALS, ModelRef
from .base import (
    Backend,
    Decoding,
    FineTuneRequest,
    GenerateRequest,
    Hyperparameters,
    InputTooLongError,
    NotFoundError,
    SeqPair,
    wait_for_job,
)

SPECIAL_TOKENS = RESERVED_LITERALS

_TOY_EXAMPLES = (
    SeqPair("<PARSE> copy alpha", "<subQ> return alpha"),
    SeqPair("<PARSE> copy beta", "<subQ> return beta"),
    SeqPair("<PARSE> copy gamma", "<subQ> return gamma"),
    SeqPair("<PARSE> copy delta", "<subQ> return delta"),
    SeqPair("<PARSE> copy omega", "<subQ> return omega"),
)

_PROBE_INPUTS = ("<PARSE> copy alpha", "<PARSE> copy beta", "<PARSE> copy gamma")


@dataclass
class ConformanceHarness:
    """Everything the suite needs to exercise one provider.

    over_budget_text triggers the provider's input limit when set; providers
    without a practical limit leave it None and skip that check.
    """

    backend: Backend
    base: ModelRef
    over_budget_text: Optional[str] = None
    hyper: Hyperparameters = field(default_factory=lambda: Hyperparameters(seed=13))
    max_new_tokens: int = 32
    poll_interval: float = 0.1
    poll_timeout: float = 120.0


def _check(condition: bool, name: str, detail: str = "") -> None:
    if not condition:
        raise AssertionError(f"conformance check failed: {name}" + (f" ({detail})" if detail else ""))


def run_conformance(h: ConformanceHarness) -> list[str]:
    """Run every check; returns their names in order. Raises on first failure."""
    passed: list[str] = []
    backend = h.backend

    def done(name: str) -> None:
        passed.append(name)

    _check(backend.count_tokens(h.base, "") == 0, "count_tokens_empty", "empty text must count 0")
    done("count_tokens_empty")

    first = backend.count_tokens(h.base, "a b c")
    second = backend.count_tokens(h.base, "a b c")
    _check(first == second and first >= 1, "count_tokens_deterministic", f"{first} vs {second}")
    done("count_tokens_deterministic")

    job_id = backend.fine_tune(
        FineTuneRequest(
            base=h.base, examples=_TOY_EXAMPLES, hyper=h.hyper, special_tokens=SPECIAL_TOKENS
        )
    )
    status = wait_for_job(backend, job_id, h.poll_interval, h.poll_timeout)
    tuned = status.model
    assert tuned is not None
    _check(
        tuned.lineage == h.base.lineage + (h.base.handle,),
        "fine_tune_lineage",
        f"lineage {tuned.lineage}",
    )
    done("fine_tune_lineage")

    for literal in SPECIAL_TOKENS:
        n = backend.count_tokens(tuned, literal)
        _check(n == 1, "special_token_atomic", f"{literal!r} counted as {n} tokens")
    done("special_token_atomic")

    req = GenerateRequest(
        model=tuned,
        inputs=_PROBE_INPUTS,
        decoding=Decoding.greedy(),
        max_new_tokens=h.max_new_tokens,
        seed=h.hyper.seed,
    )
    outputs_a = backend.generate(req)
    _check(len(outputs_a) == len(_PROBE_INPUTS), "generate_alignment", f"{len(outputs_a)} outputs")
    done("generate_alignment")

    outputs_b = backend.generate(req)
    _check(outputs_a == outputs_b, "generate_deterministic", "greedy outputs differ across calls")
    done("generate_deterministic")

    job2 = backend.fine_tune(
        FineTuneRequest(
            base=tuned, examples=_TOY_EXAMPLES[:2], hyper=h.hyper, special_tokens=SPECIAL_TOKENS
        )
    )
    tuned2 = wait_for_job(backend, job2, h.poll_interval, h.poll_timeout).model
    assert tuned2 is not None
    _check(
        len(tuned2.lineage) == len(tuned.lineage) + 1 and tuned2.lineage[-1] == tuned.handle,
        "fine_tune_chain",
        f"lineage {tuned2.lineage}",
    )
    done("fine_tune_chain")

    ghost = ModelRef(handle="no-such-model-ever", backend_id=backend.backend_id)
    try:
        backend.generate(GenerateRequest(model=ghost, inputs=("hello",)))
        _check(False, "unknown_model", "generate on an unknown handle did not raise")
    except NotFoundError:
        pass
    done("unknown_model")

    try:
        backend.poll_job("no-such-job-ever")
        _check(False, "unknown_job", "poll of an unknown job did not raise")
    except NotFoundError:
        pass
    done("unknown_job")

    if h.over_budget_text is not None:
        try:
            backend.generate(GenerateRequest(model=tuned, inputs=(h.over_budget_text,)))
            _check(False, "input_too_long", "over-budget input did not raise")
        except InputTooLongError as exc:
            _check(exc.length > 0, "input_too_long", "error carried no measured length")
        done("input_too_long")

    try:
        GenerateRequest(model=tuned, inputs=())
        _check(False, "empty_batch_rejected", "empty input batch was accepted")
    except ValueError:
        pass
    done("empty_batch_rejected")

    return passed
