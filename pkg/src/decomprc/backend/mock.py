"""Deterministic in-process backend for tests and dry runs.

Generation is table-driven: decomposer inputs are answered from a
question -> target-string table (falling back to the single-step template
"<subQ> return <question>"), reader inputs from a question -> answer table
(falling back to "unknown"). Anything else echoes. Token counting is plain
whitespace splitting, and fine-tune jobs resolve synchronously.
"""

from __future__ import annotations

import itertools
import json
import threading
from pathlib import Path
from typing import Mapping, Optional

from ..core import ModelRef
from .base import (
    Backend,
    FineTuneRequest,
    GenerateRequest,
    InputTooLongError,
    JobState,
    JobStatus,
    NotFoundError,
)

_PARSE_PREFIX = "<PARSE> "
_QUESTION_PREFIX = "<QUESTION> "
_FALLBACK_ANSWER = "unknown"


def _reader_question(source: str) -> str:
    """The question segment of a reader input (up to the first marker)."""
    body = source[len(_QUESTION_PREFIX) :]
    cut = len(body)
    for marker in (" <subQ> ", " <CONTEXT> ", " <CONTEXT>"):
        pos = body.find(marker)
        if pos != -1:
            cut = min(cut, pos)
    return body[:cut]


class MockBackend(Backend):
    def __init__(
        self,
        decompositions: Optional[Mapping[str, str]] = None,
        answers: Optional[Mapping[str, str]] = None,
        base_handle: str = "mock-base",
        max_source_tokens: int = 0,
        backend_id: str = "mock",
    ) -> None:
        self._decompositions = dict(decompositions or {})
        self._answers = dict(answers or {})
        self._max_source_tokens = max_source_tokens
        self._backend_id = backend_id
        self._models: dict[str, ModelRef] = {
            base_handle: ModelRef(handle=base_handle, backend_id=backend_id)
        }
        self._jobs: dict[str, JobStatus] = {}
        self._counter = itertools.count(1)
        self._lock = threading.Lock()
        self.fine_tune_log: list[FineTuneRequest] = []

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "MockBackend":
        """Load lookup tables from a JSON file {decompositions:{}, answers:{}}."""
        with open(path, encoding="utf-8") as fh:
            tables = json.load(fh)
        return cls(
            decompositions=tables.get("decompositions", {}),
            answers=tables.get("answers", {}),
            **kwargs,
        )

    @property
    def backend_id(self) -> str:
        return self._backend_id

    def _require_model(self, handle: str) -> None:
        if handle not in self._models:
            raise NotFoundError(f"unknown model handle {handle!r}")

    def _generate_one(self, source: str) -> str:
        if self._max_source_tokens:
            length = len(source.split())
            if length > self._max_source_tokens:
                raise InputTooLongError(
                    f"input of {length} tokens exceeds limit {self._max_source_tokens}", length
                )
        if source.startswith(_PARSE_PREFIX):
            question = source[len(_PARSE_PREFIX) :]
            return self._decompositions.get(question, f"<subQ> return {question}")
        if source.startswith(_QUESTION_PREFIX):
            return self._answers.get(_reader_question(source), _FALLBACK_ANSWER)
        return source

    def generate(self, req: GenerateRequest) -> tuple[str, ...]:
        with self._lock:
            self._require_model(req.model.handle)
        return tuple(self._generate_one(source) for source in req.inputs)

    def fine_tune(self, req: FineTuneRequest) -> str:
        with self._lock:
            self._require_model(req.base.handle)
            n = next(self._counter)
            job_id = f"job-{n}"
            model = req.base.child(f"{self._backend_id}-m{n}")
            self._models[model.handle] = model
            self._jobs[job_id] = JobStatus(state=JobState.DONE, model=model)
            self.fine_tune_log.append(req)
        return job_id

    def poll_job(self, job_id: str) -> JobStatus:
        with self._lock:
            status = self._jobs.get(job_id)
        if status is None:
            raise NotFoundError(f"unknown job id {job_id!r}")
        return status

    def count_tokens(self, model: ModelRef, text: str) -> int:
        with self._lock:
            self._require_model(model.handle)
        return len(text.split())
