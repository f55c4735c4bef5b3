"""Record/replay providers for bit-exact reproducibility.

RecordingBackend wraps any provider and appends every call's outcome
(response or error) to a JSONL log, keyed by a digest of the canonical wire
form of the request. ReplayBackend serves a recorded log back: identical
requests get identical responses, recorded errors re-raise as the same
exception types, and the replayed backend_id matches the original so model
handles and manifests reproduce byte-exactly.

Poll results are keyed by job id with last-status-wins, so replayed jobs
resolve to their terminal state immediately.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Optional

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

RECORDS_FILENAME = "records.jsonl"

_ERROR_CLASSES = {
    "NOT_FOUND": NotFoundError,
    "INPUT_TOO_LONG": InputTooLongError,
    "TRANSPORT": TransportError,
    "BACKEND": BackendError,
}


def _digest(wire: dict) -> str:
    canonical = json.dumps(wire, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _error_to_json(exc: BackendError) -> dict:
    if isinstance(exc, NotFoundError):
        code = "NOT_FOUND"
    elif isinstance(exc, InputTooLongError):
        return {"code": "INPUT_TOO_LONG", "message": str(exc), "length": exc.length}
    elif isinstance(exc, TransportError):
        code = "TRANSPORT"
    else:
        code = "BACKEND"
    return {"code": code, "message": str(exc)}


def _error_from_json(obj: dict) -> BackendError:
    cls = _ERROR_CLASSES.get(obj.get("code", "BACKEND"), BackendError)
    if cls is InputTooLongError:
        return InputTooLongError(obj.get("message", ""), obj.get("length", 0))
    return cls(obj.get("message", ""))


def _model_to_json(model: ModelRef) -> dict:
    return {"handle": model.handle, "backend_id": model.backend_id, "lineage": list(model.lineage)}


def _model_from_json(obj: dict) -> ModelRef:
    return ModelRef(handle=obj["handle"], backend_id=obj["backend_id"], lineage=tuple(obj["lineage"]))


def _status_to_json(status: JobStatus) -> dict:
    out: dict = {"state": status.state.value}
    if status.model is not None:
        out["model"] = _model_to_json(status.model)
    if status.reason:
        out["reason"] = status.reason
    if status.loss_samples:
        out["loss_samples"] = list(status.loss_samples)
    return out


def _status_from_json(obj: dict) -> JobStatus:
    model = obj.get("model")
    return JobStatus(
        state=JobState(obj["state"]),
        model=_model_from_json(model) if model else None,
        reason=obj.get("reason", ""),
        loss_samples=tuple(obj.get("loss_samples", ())),
    )


class RecordingBackend(Backend):
    """Pass-through wrapper that logs every call outcome under `directory`."""

    def __init__(self, inner: Backend, directory: str | Path) -> None:
        self._inner = inner
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._path = self._dir / RECORDS_FILENAME
        self._lock = threading.Lock()
        if not self._path.exists():
            self._write({"op": "header", "backend_id": inner.backend_id})

    @property
    def backend_id(self) -> str:
        return self._inner.backend_id

    def _write(self, event: dict) -> None:
        line = json.dumps(event, ensure_ascii=False)
        with self._lock:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def generate(self, req: GenerateRequest) -> tuple[str, ...]:
        key = _digest(req.to_wire())
        try:
            outputs = self._inner.generate(req)
        except BackendError as exc:
            self._write({"op": "generate", "key": key, "error": _error_to_json(exc)})
            raise
        self._write({"op": "generate", "key": key, "outputs": list(outputs)})
        return outputs

    def fine_tune(self, req: FineTuneRequest) -> str:
        key = _digest(req.to_wire())
        try:
            job_id = self._inner.fine_tune(req)
        except BackendError as exc:
            self._write({"op": "fine_tune", "key": key, "error": _error_to_json(exc)})
            raise
        self._write({"op": "fine_tune", "key": key, "job_id": job_id})
        return job_id

    def poll_job(self, job_id: str) -> JobStatus:
        try:
            status = self._inner.poll_job(job_id)
        except BackendError as exc:
            self._write({"op": "poll", "key": job_id, "error": _error_to_json(exc)})
            raise
        self._write({"op": "poll", "key": job_id, "status": _status_to_json(status)})
        return status

    def count_tokens(self, model: ModelRef, text: str) -> int:
        key = _digest({"model": model.handle, "text": text})
        try:
            count = self._inner.count_tokens(model, text)
        except BackendError as exc:
            self._write({"op": "count", "key": key, "error": _error_to_json(exc)})
            raise
        self._write({"op": "count", "key": key, "count": count})
        return count


class ReplayBackend(Backend):
    """Serves a RecordingBackend log; every request must have been recorded."""

    def __init__(self, directory: str | Path) -> None:
        path = Path(directory) / RECORDS_FILENAME
        if not path.exists():
            raise FileNotFoundError(f"no recording at {path}")
        self._backend_id: Optional[str] = None
        self._events: dict[tuple[str, str], dict] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                op = event["op"]
                if op == "header":
                    self._backend_id = event["backend_id"]
                    continue
                slot = (op, event["key"])
                if op == "poll":
                    self._events[slot] = event
                elif slot in self._events:
                    if self._events[slot] != event:
                        raise ValueError(
                            f"{path}:{lineno}: conflicting recordings for the same {op} request"
                        )
                else:
                    self._events[slot] = event
        if self._backend_id is None:
            raise ValueError(f"{path}: recording has no header line")

    @property
    def backend_id(self) -> str:
        assert self._backend_id is not None
        return self._backend_id

    def _lookup(self, op: str, key: str) -> dict:
        event = self._events.get((op, key))
        if event is None:
            raise BackendError(f"replay miss: no recorded {op} response for this request")
        if "error" in event:
            raise _error_from_json(event["error"])
        return event

    def generate(self, req: GenerateRequest) -> tuple[str, ...]:
        event = self._lookup("generate", _digest(req.to_wire()))
        return tuple(event["outputs"])

    def fine_tune(self, req: FineTuneRequest) -> str:
        return self._lookup("fine_tune", _digest(req.to_wire()))["job_id"]

    def poll_job(self, job_id: str) -> JobStatus:
        return _status_from_json(self._lookup("poll", job_id)["status"])

    def count_tokens(self, model: ModelRef, text: str) -> int:
        return self._lookup("count", _digest({"model": model.handle, "text": text}))["count"]
