"""HTTP client for remote backends speaking the /v1 wire protocol.

Generate batches are chunked and dispatched with a bounded number of in-flight
requests; outputs are reassembled in input order regardless of completion
order. Connection failures, timeouts, 5xx responses, and INTERNAL error bodies
retry with exponential backoff (no jitter, so runs stay deterministic);
NOT_FOUND and INPUT_TOO_LONG never retry.

Model lineage is a client-side notion: the wire carries bare handles, and this
client derives a tuned model's lineage from the fine-tune request it issued.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional
from urllib.parse import urlparse

import requests

from ..core import ModelRef
from .base import (
    Backend,
    BackendError,
    FineTuneRequest,
    GenerateRequest,
    InputTooLongError,
    JobState,
    JobStatus,
    NotFoundError,
    TransportError,
)


class _Retryable(Exception):
    """Internal marker: the wrapped failure is safe to retry."""


def _raise_for_error_body(payload: dict) -> None:
    error = payload.get("error")
    if not isinstance(error, dict):
        return
    code = error.get("code", "")
    message = error.get("message", "")
    if code == "NOT_FOUND":
        raise NotFoundError(message)
    if code == "INPUT_TOO_LONG":
        raise InputTooLongError(message, int(error.get("length", 0)))
    if code == "INTERNAL":
        raise _Retryable(message)
    raise BackendError(f"{code or 'unknown error'}: {message}")


class HttpBackend(Backend):
    def __init__(
        self,
        base_url: str,
        auth_token: Optional[str] = None,
        timeout: float = 60.0,
        max_retries: int = 4,
        backoff_base: float = 0.2,
        backoff_cap: float = 5.0,
        max_in_flight: int = 4,
        batch_size: int = 16,
        session: Optional[requests.Session] = None,
    ) -> None:
        if batch_size <= 0 or max_in_flight <= 0:
            raise ValueError("batch_size and max_in_flight must be positive")
        self._base_url = base_url.rstrip("/")
        self._timeout = timeout
        self._max_retries = max_retries
        self._backoff_base = backoff_base
        self._backoff_cap = backoff_cap
        self._max_in_flight = max_in_flight
        self._batch_size = batch_size
        self._session = session or requests.Session()
        self._headers = {"Content-Type": "application/json"}
        if auth_token:
            self._headers["Authorization"] = f"Bearer {auth_token}"
        self._job_bases: dict[str, ModelRef] = {}
        netloc = urlparse(self._base_url).netloc
        self._backend_id = f"http:{netloc}"

    @property
    def backend_id(self) -> str:
        return self._backend_id

    def _request_once(self, method: str, path: str, body: Optional[dict]) -> dict:
        url = f"{self._base_url}{path}"
        try:
            response = self._session.request(
                method, url, json=body, headers=self._headers, timeout=self._timeout
            )
        except requests.RequestException as exc:
            raise _Retryable(f"{method} {path}: {exc}") from exc
        try:
            payload = response.json()
        except ValueError:
            payload = {}
        if isinstance(payload, dict):
            _raise_for_error_body(payload)
        if response.status_code >= 500:
            raise _Retryable(f"{method} {path}: server returned {response.status_code}")
        if response.status_code >= 400:
            raise BackendError(f"{method} {path}: status {response.status_code}")
        if not isinstance(payload, dict):
            raise BackendError(f"{method} {path}: non-object response body")
        return payload

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        attempt = 0
        while True:
            try:
                return self._request_once(method, path, body)
            except _Retryable as exc:
                if attempt >= self._max_retries:
                    raise TransportError(str(exc)) from exc
                time.sleep(min(self._backoff_cap, self._backoff_base * (2**attempt)))
                attempt += 1

    def generate(self, req: GenerateRequest) -> tuple[str, ...]:
        chunks = [
            req.inputs[i : i + self._batch_size]
            for i in range(0, len(req.inputs), self._batch_size)
        ]

        def run_chunk(chunk: tuple[str, ...]) -> list[str]:
            body = req.to_wire()
            body["inputs"] = list(chunk)
            payload = self._request("POST", "/v1/generate", body)
            outputs = payload.get("outputs")
            if not isinstance(outputs, list) or len(outputs) != len(chunk):
                raise BackendError(
                    f"generate returned {len(outputs) if isinstance(outputs, list) else 'no'} "
                    f"outputs for {len(chunk)} inputs"
                )
            return outputs

        if len(chunks) == 1:
            return tuple(run_chunk(chunks[0]))
        with ThreadPoolExecutor(max_workers=self._max_in_flight) as pool:
            results = list(pool.map(run_chunk, chunks))
        return tuple(output for chunk_outputs in results for output in chunk_outputs)

    def fine_tune(self, req: FineTuneRequest) -> str:
        payload = self._request("POST", "/v1/finetune", req.to_wire())
        job_id = payload.get("job_id")
        if not isinstance(job_id, str) or not job_id:
            raise BackendError("finetune response carried no job_id")
        self._job_bases[job_id] = req.base
        return job_id

    def poll_job(self, job_id: str) -> JobStatus:
        payload = self._request("GET", f"/v1/jobs/{job_id}")
        state = JobState(payload.get("status", "pending"))
        if state is JobState.DONE:
            handle = payload.get("model", "")
            if not handle:
                raise BackendError(f"job {job_id} is done but carried no model handle")
            base = self._job_bases.get(job_id)
            if base is not None:
                model = base.child(handle)
            else:
                model = ModelRef(handle=handle, backend_id=self._backend_id)
            return JobStatus(
                state=state, model=model, loss_samples=tuple(payload.get("loss_samples", ()))
            )
        if state is JobState.FAILED:
            return JobStatus(state=state, reason=payload.get("reason", "unspecified"))
        return JobStatus(state=state)

    def count_tokens(self, model: ModelRef, text: str) -> int:
        payload = self._request("POST", "/v1/count_tokens", {"model": model.handle, "text": text})
        count = payload.get("count")
        if not isinstance(count, int) or count < 0:
            raise BackendError("count_tokens response carried no valid count")
        return count
