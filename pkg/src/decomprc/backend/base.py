"""Provider-neutral contract for seq2seq model backends.

A backend exposes three operations: generate (batched, order-preserving),
fine_tune (asynchronous job returning a fresh model handle), and count_tokens
(the backend tokenizer's view of a text, used for source truncation). All
providers — mock, recording/replay, remote HTTP client, and the reference
service — implement this interface and must pass the same black-box
conformance suite.

Wire mapping (for transports): requests/responses serialize as
  POST /v1/generate     {model, inputs[], decoding:{kind, width?}, max_new_tokens, seed?} -> {outputs[]}
  POST /v1/finetune     {base, examples[{source,target}], hyper{epochs,learning_rate,batch_size,seed},
                         special_tokens[]} -> {job_id}
  GET  /v1/jobs/{id}    -> {status: pending|done|failed, model?, reason?, loss_samples?[]}
  POST /v1/count_tokens {model, text} -> {count}
with errors as {error:{code,message}} and codes NOT_FOUND, INPUT_TOO_LONG,
INTERNAL. Unknown fields are ignored by both sides.
"""

from __future__ import annotations

import abc
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from ..core import ModelRef


class BackendError(Exception):
    """Base class for provider failures."""


class NotFoundError(BackendError):
    """Unknown model handle or job id."""


class TransportError(BackendError):
    """Retryable transport-level failure (connection, timeout, server error)."""


class InputTooLongError(BackendError):
    """Source text exceeded the model's input limit; carries the measured length."""

    def __init__(self, message: str, length: int = 0) -> None:
        super().__init__(message)
        self.length = length


class FineTuneFailed(BackendError):
    """A fine-tune job finished in the failed state; carries the backend reason."""


@dataclass(frozen=True, slots=True)
class SeqPair:
    """One (source text -> target text) training example."""

    source: str
    target: str

    def __post_init__(self) -> None:
        if not self.source or not self.target:
            raise ValueError("SeqPair source and target must be non-empty")


@dataclass(frozen=True, slots=True)
class Hyperparameters:
    epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 13

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    def to_wire(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


@dataclass(frozen=True, slots=True)
class Decoding:
    """Decoding strategy; greedy is the default everywhere."""

    kind: str
    width: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding kind {self.kind!r}")
        if self.kind == "beam" and self.width < 2:
            raise ValueError(f"beam width must be >= 2, got {self.width}")
        if self.kind == "greedy" and self.width:
            raise ValueError("greedy decoding takes no width")

    @classmethod
    def greedy(cls) -> "Decoding":
        return cls("greedy")

    @classmethod
    def beam(cls, width: int) -> "Decoding":
        return cls("beam", width)

    def to_wire(self) -> dict:
        wire: dict = {"kind": self.kind}
        if self.kind == "beam":
            wire["width"] = self.width
        return wire


@dataclass(frozen=True, slots=True)
class GenerateRequest:
    model: ModelRef
    inputs: tuple[str, ...]
    decoding: Decoding = Decoding.greedy()
    max_new_tokens: int = 64
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.inputs:
            raise ValueError("generate requires at least one input")
        if self.max_new_tokens <= 0:
            raise ValueError(f"max_new_tokens must be positive, got {self.max_new_tokens}")

    def to_wire(self) -> dict:
        wire: dict = {
            "model": self.model.handle,
            "inputs": list(self.inputs),
            "decoding": self.decoding.to_wire(),
            "max_new_tokens": self.max_new_tokens,
        }
        if self.seed is not None:
            wire["seed"] = self.seed
        return wire


@dataclass(frozen=True, slots=True)
class FineTuneRequest:
    base: ModelRef
    examples: tuple[SeqPair, ...]
    hyper: Hyperparameters
    special_tokens: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.examples:
            raise ValueError("fine-tune requires at least one example")

    def to_wire(self) -> dict:
        return {
            "base": self.base.handle,
            "examples": [{"source": p.source, "target": p.target} for p in self.examples],
            "hyper": self.hyper.to_wire(),
            "special_tokens": list(self.special_tokens),
        }


class JobState(str, Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True, slots=True)
class JobStatus:
    state: JobState
    model: Optional[ModelRef] = None
    reason: str = ""
    loss_samples: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.state is JobState.DONE and self.model is None:
            raise ValueError("done job must carry a model")
        if self.state is JobState.FAILED and not self.reason:
            raise ValueError("failed job must carry a reason")


class Backend(abc.ABC):
    """Shareable provider handle; generate/count are safe to call concurrently.

    Fine-tune jobs for the same lineage must be serialized by the caller.
    """

    @property
    @abc.abstractmethod
    def backend_id(self) -> str: ...

    @abc.abstractmethod
    def generate(self, req: GenerateRequest) -> tuple[str, ...]:
        """One output per input, order-preserving; deterministic under greedy
        decoding with a fixed model and seed."""

    @abc.abstractmethod
    def fine_tune(self, req: FineTuneRequest) -> str:
        """Start a fine-tune job; returns its job id immediately."""

    @abc.abstractmethod
    def poll_job(self, job_id: str) -> JobStatus: ...

    @abc.abstractmethod
    def count_tokens(self, model: ModelRef, text: str) -> int:
        """Length of `text` under the model's tokenizer; empty text counts 0."""


def wait_for_job(
    backend: Backend,
    job_id: str,
    poll_interval: float = 0.2,
    timeout: float = 3600.0,
) -> JobStatus:
    """Poll until the job leaves the pending state; raises FineTuneFailed on failure."""
    deadline = time.monotonic() + timeout
    while True:
        status = backend.poll_job(job_id)
        if status.state is JobState.DONE:
            return status
        if status.state is JobState.FAILED:
            raise FineTuneFailed(f"fine-tune job {job_id} failed: {status.reason}")
        if time.monotonic() >= deadline:
            raise TransportError(f"fine-tune job {job_id} still pending after {timeout:.0f}s")
        time.sleep(poll_interval)
