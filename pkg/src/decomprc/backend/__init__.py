from .base import (
    Backend,
    BackendError,
    Decoding,
    FineTuneFailed,
    FineTuneRequest,
    GenerateRequest,
    Hyperparameters,
    InputTooLongError,
    JobState,
    JobStatus,
    NotFoundError,
    SeqPair,
    TransportError,
    wait_for_job,
)
from .conformance import ConformanceHarness, run_conformance
from .http import HttpBackend
from .mock import MockBackend
from .recording import RecordingBackend, ReplayBackend

__all__ = [
    "Backend",
    "BackendError",
    "ConformanceHarness",
    "Decoding",
    "FineTuneFailed",
    "FineTuneRequest",
    "GenerateRequest",
    "HttpBackend",
    "Hyperparameters",
    "InputTooLongError",
    "JobState",
    "JobStatus",
    "MockBackend",
    "NotFoundError",
    "RecordingBackend",
    "ReplayBackend",
    "SeqPair",
    "TransportError",
    "run_conformance",
    "wait_for_job",
]
