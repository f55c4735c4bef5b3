"""Training and inference regimes over a seq2seq backend.

Variants:
  baseline_rc         reader only, no sub-questions anywhere.
  separate_predicted  decomposer + reader trained on the annotated set;
                      inference uses generated sub-questions.
  separate_gold       same trained models; inference uses gold sub-questions.
  separate_augmented  reader additionally trained on the weak set carrying
                      decomposer-generated sub-questions; gold at inference.
  unified_multitask   one model, both tasks, annotated set only.
  unified_hard_em     unified model trained by alternating predict/retrain:
                      M0 on the annotated set; each iteration predicts
                      decompositions for the weak remainder, then continues
                      fine-tuning M^{iter-1} on the union (gold decompositions
                      for the annotated set, predicted for the remainder;
                      reader pairs for both). Default 10 iterations.

All long-running stages checkpoint to disk (atomic write-then-rename for
state, per-batch appends for predictions) and resume deterministically: under
a replay provider, crash-and-resume reproduces the uninterrupted run byte for
byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from . import storage
from .backend.base import (
    Backend,
    Decoding,
    FineTuneRequest,
    GenerateRequest,
    Hyperparameters,
    SeqPair,
    wait_for_job,
)
from .core import (
    Decomposition,
    DatasetSplit,
    ModelRef,
    Prediction,
    QAInstance,
    RESERVED_LITERALS,
    SplitName,
)
from .qdmr import (
    DecodeFallback,
    decode_decomposition,
    encode_decomposer_input,
    encode_decomposer_target,
    encode_rc_input,
    fallback_step_text,
)

STATE_FILENAME = "state.json"

_POLL_INTERVAL = 0.2
_POLL_TIMEOUT = 3600.0


class Variant(str, Enum):
    BASELINE_RC = "baseline_rc"
    SEPARATE_PREDICTED = "separate_predicted"
    SEPARATE_GOLD = "separate_gold"
    SEPARATE_AUGMENTED = "separate_augmented"
    UNIFIED_MULTITASK = "unified_multitask"
    UNIFIED_HARD_EM = "unified_hard_em"


class RCMode(str, Enum):
    WITH_SUBQ = "with_subq"
    WITHOUT_SUBQ = "without_subq"


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    variant: Variant
    base_model: str
    n_iters: int = 10
    decoding: Decoding = Decoding.greedy()
    source_budget: int = 512
    max_new_tokens: int = 64
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    seed: int = 13
    predict_batch_size: int = 16
    from_scratch_each_iteration: bool = False
    early_stop_patience: int = 0

    def __post_init__(self) -> None:
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.source_budget <= 0:
            raise ValueError(f"source_budget must be positive, got {self.source_budget}")
        if self.max_new_tokens <= 0:
            raise ValueError(f"max_new_tokens must be positive, got {self.max_new_tokens}")
        if self.predict_batch_size <= 0:
            raise ValueError(f"predict_batch_size must be positive, got {self.predict_batch_size}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0 (0 disables early stop)")
        if not self.base_model:
            raise ValueError("base_model handle must be non-empty")

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "base_model": self.base_model,
            "n_iters": self.n_iters,
            "decoding": self.decoding.to_wire(),
            "source_budget": self.source_budget,
            "max_new_tokens": self.max_new_tokens,
            "hyper": self.hyper.to_wire(),
            "seed": self.seed,
            "predict_batch_size": self.predict_batch_size,
            "from_scratch_each_iteration": self.from_scratch_each_iteration,
            "early_stop_patience": self.early_stop_patience,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        decoding_obj = obj.get("decoding", {"kind": "greedy"})
        hyper_obj = obj.get("hyper", {})
        return cls(
            variant=Variant(obj["variant"]),
            base_model=obj["base_model"],
            n_iters=obj.get("n_iters", 10),
            decoding=Decoding(decoding_obj["kind"], decoding_obj.get("width", 0)),
            source_budget=obj.get("source_budget", 512),
            max_new_tokens=obj.get("max_new_tokens", 64),
            hyper=Hyperparameters(
                epochs=hyper_obj.get("epochs", 1),
                learning_rate=hyper_obj.get("learning_rate", 1e-3),
                batch_size=hyper_obj.get("batch_size", 8),
                seed=hyper_obj.get("seed", 13),
            ),
            seed=obj.get("seed", 13),
            predict_batch_size=obj.get("predict_batch_size", 16),
            from_scratch_each_iteration=obj.get("from_scratch_each_iteration", False),
            early_stop_patience=obj.get("early_stop_patience", 0),
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True, slots=True)
class TrainedModels:
    decomposer: Optional[ModelRef] = None
    rc: Optional[ModelRef] = None
    unified: Optional[ModelRef] = None


@dataclass(frozen=True, slots=True)
class PredictStats:
    n_predicted: int
    n_fallbacks: int


@dataclass(frozen=True, slots=True)
class IterationRecord:
    model_handle: str
    n_predicted: int
    n_fallbacks: int
    scores: Optional[dict] = None

    def to_json(self) -> dict:
        out: dict = {
            "model_handle": self.model_handle,
            "n_predicted": self.n_predicted,
            "n_fallbacks": self.n_fallbacks,
        }
        if self.scores is not None:
            out["scores"] = self.scores
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "IterationRecord":
        return cls(
            model_handle=obj["model_handle"],
            n_predicted=obj["n_predicted"],
            n_fallbacks=obj["n_fallbacks"],
            scores=obj.get("scores"),
        )


@dataclass(frozen=True, slots=True)
class HardEmState:
    """Progress of the alternating loop: `iteration` counts completed retrains
    (0 means only the initial model exists)."""

    iteration: int
    model: ModelRef
    d_iter: Optional[DatasetSplit]
    history: tuple[IterationRecord, ...]

    def __post_init__(self) -> None:
        if len(self.history) != self.iteration + 1:
            raise ValueError(
                f"history has {len(self.history)} records for iteration {self.iteration}"
            )


def token_counter(backend: Backend, model: ModelRef) -> Callable[[str], int]:
    """Budget measure for source encoding: the backend tokenizer's count."""
    return lambda text: backend.count_tokens(model, text)


def base_ref(backend: Backend, config: ExperimentConfig) -> ModelRef:
    return ModelRef(handle=config.base_model, backend_id=backend.backend_id)


def _fine_tune(
    backend: Backend, base: ModelRef, pairs: Sequence[SeqPair], config: ExperimentConfig
) -> ModelRef:
    req = FineTuneRequest(
        base=base,
        examples=tuple(pairs),
        hyper=config.hyper,
        special_tokens=RESERVED_LITERALS,
    )
    job_id = backend.fine_tune(req)
    status = wait_for_job(backend, job_id, _POLL_INTERVAL, _POLL_TIMEOUT)
    assert status.model is not None
    return status.model


def decomposer_pairs(
    instances: Sequence[QAInstance], *, expect_predicted: bool = False
) -> list[SeqPair]:
    """Decomposer training pairs; the provenance flag is checked so gold and
    predicted decompositions can never silently swap roles."""
    pairs = []
    for inst in instances:
        z = inst.gold_decomposition
        if z is None:
            raise ValueError(f"instance {inst.id} has no decomposition to train on")
        if z.predicted != expect_predicted:
            expected = "predicted" if expect_predicted else "gold"
            raise ValueError(f"instance {inst.id}: expected a {expected} decomposition")
        pairs.append(SeqPair(encode_decomposer_input(inst.question), encode_decomposer_target(z)))
    return pairs


def rc_pairs(
    instances: Sequence[QAInstance],
    mode: RCMode,
    config: ExperimentConfig,
    count_tokens: Callable[[str], int],
) -> list[SeqPair]:
    """Reader training pairs: encoded source -> primary gold answer as text."""
    pairs = []
    for inst in instances:
        if mode is RCMode.WITH_SUBQ:
            z: Optional[Decomposition] = inst.gold_decomposition
            if z is None:
                raise ValueError(f"instance {inst.id} has no decomposition for with_subq training")
        else:
            z = None
        source = encode_rc_input(inst.question, z, inst.context, config.source_budget, count_tokens)
        pairs.append(SeqPair(source, inst.primary_answer.as_text()))
    return pairs


def train_decomposer(
    backend: Backend, d2_train: DatasetSplit, config: ExperimentConfig
) -> ModelRef:
    base = base_ref(backend, config)
    return _fine_tune(backend, base, decomposer_pairs(d2_train.instances), config)


def train_rc(
    backend: Backend,
    splits: Sequence[DatasetSplit],
    mode: RCMode,
    config: ExperimentConfig,
    base: Optional[ModelRef] = None,
) -> ModelRef:
    if not splits:
        raise ValueError("train_rc needs at least one split")
    base = base or base_ref(backend, config)
    counter = token_counter(backend, base)
    pairs: list[SeqPair] = []
    for split in splits:
        pairs.extend(rc_pairs(split.instances, mode, config, counter))
    return _fine_tune(backend, base, pairs, config)


def train_unified_multitask(
    backend: Backend, d2_train: DatasetSplit, config: ExperimentConfig
) -> ModelRef:
    """Single fine-tune over decomposer and reader pairs for the annotated set;
    tasks are distinguished only by source prefix. Pair order is shuffled
    deterministically by the experiment seed."""
    base = base_ref(backend, config)
    counter = token_counter(backend, base)
    pairs = decomposer_pairs(d2_train.instances)
    pairs.extend(rc_pairs(d2_train.instances, RCMode.WITH_SUBQ, config, counter))
    random.Random(config.seed).shuffle(pairs)
    return _fine_tune(backend, base, pairs, config)


def decomposition_from_raw(raw: str, question: str) -> tuple[Decomposition, bool]:
    """Predicted decomposition from raw decoder output.

    Unparseable output becomes a single opaque step (the stripped raw text, or
    the question itself when nothing survives) so downstream set sizes stay
    constant; the second return value flags that fallback.
    """
    decoded = decode_decomposition(raw)
    if isinstance(decoded, DecodeFallback):
        text = fallback_step_text(raw) or question.strip()
        return Decomposition.from_texts([text], predicted=True, ill_formed=True), True
    return decoded.as_predicted(), False


def _load_raw_map(path: Path) -> dict[str, str]:
    """id -> raw decoder output from a predictions checkpoint; tolerates a
    truncated final line (interrupted append)."""
    raws: dict[str, str] = {}
    if not path.exists():
        return raws
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for idx, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            if idx == len(lines) - 1:
                break
            raise ValueError(f"{path}:{idx + 1}: corrupt checkpoint line")
        raws[obj["id"]] = obj["decomposition_raw"]
    return raws


def _d_iter_from_raws(
    instances: Sequence[QAInstance], raws: Mapping[str, str]
) -> tuple[DatasetSplit, int]:
    decorated = []
    n_fallbacks = 0
    for inst in instances:
        if inst.id not in raws:
            raise ValueError(f"predictions checkpoint is missing instance {inst.id}")
        z, is_fallback = decomposition_from_raw(raws[inst.id], inst.question)
        n_fallbacks += int(is_fallback)
        decorated.append(inst.with_decomposition(z))
    return DatasetSplit(name=SplitName.D_ITER, instances=tuple(decorated)), n_fallbacks


def predict_decompositions(
    backend: Backend,
    model: ModelRef,
    split: DatasetSplit,
    config: ExperimentConfig,
    checkpoint_path: Optional[str | Path] = None,
    on_batch: Optional[Callable[[int], None]] = None,
) -> tuple[DatasetSplit, PredictStats]:
    """One predicted decomposition per instance, count-preserving.

    With a checkpoint path, raw outputs append per batch as
    {id, decomposition_raw, ill_formed} lines and an interrupted run resumes
    by predicting only the missing instances.
    """
    path = Path(checkpoint_path) if checkpoint_path is not None else None
    raws = _load_raw_map(path) if path is not None else {}
    missing = [inst for inst in split.instances if inst.id not in raws]

    batch_index = 0
    for start in range(0, len(missing), config.predict_batch_size):
        batch = missing[start : start + config.predict_batch_size]
        req = GenerateRequest(
            model=model,
            inputs=tuple(encode_decomposer_input(inst.question) for inst in batch),
            decoding=config.decoding,
            max_new_tokens=config.max_new_tokens,
            seed=config.seed,
        )
        outputs = backend.generate(req)
        rows = []
        for inst, raw in zip(batch, outputs):
            raws[inst.id] = raw
            _, is_fallback = decomposition_from_raw(raw, inst.question)
            rows.append({"id": inst.id, "decomposition_raw": raw, "ill_formed": is_fallback})
        if path is not None:
            storage.append_jsonl(path, rows)
        batch_index += 1
        if on_batch is not None:
            on_batch(batch_index)

    d_iter, n_fallbacks = _d_iter_from_raws(split.instances, raws)
    return d_iter, PredictStats(n_predicted=len(d_iter), n_fallbacks=n_fallbacks)


def hard_em_pairs(
    d2_train: DatasetSplit,
    d_iter: DatasetSplit,
    config: ExperimentConfig,
    count_tokens: Callable[[str], int],
    iteration: int,
) -> list[SeqPair]:
    """Retrain set for one iteration: decomposer and reader pairs for both the
    annotated set (gold) and the predicted remainder, shuffled by a seed
    derived from (experiment seed, iteration)."""
    pairs = decomposer_pairs(d2_train.instances, expect_predicted=False)
    pairs.extend(decomposer_pairs(d_iter.instances, expect_predicted=True))
    pairs.extend(rc_pairs(d2_train.instances, RCMode.WITH_SUBQ, config, count_tokens))
    pairs.extend(rc_pairs(d_iter.instances, RCMode.WITH_SUBQ, config, count_tokens))
    random.Random(config.seed * 1000003 + iteration).shuffle(pairs)
    return pairs


def _state_to_json(state: HardEmState, config_hash: str) -> dict:
    return {
        "config_hash": config_hash,
        "iteration": state.iteration,
        "model": {
            "handle": state.model.handle,
            "backend_id": state.model.backend_id,
            "lineage": list(state.model.lineage),
        },
        "history": [rec.to_json() for rec in state.history],
    }


def _state_from_json(obj: dict) -> tuple[str, int, ModelRef, tuple[IterationRecord, ...]]:
    m = obj["model"]
    model = ModelRef(handle=m["handle"], backend_id=m["backend_id"], lineage=tuple(m["lineage"]))
    history = tuple(IterationRecord.from_json(rec) for rec in obj["history"])
    return obj["config_hash"], obj["iteration"], model, history


def _write_state_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def weak_remainder(d1_train: DatasetSplit, d2_train: DatasetSplit) -> DatasetSplit:
    """D1 minus D2 by id, preserving D1 order; errors if D2 is not a subset."""
    d1_ids = set(d1_train.ids())
    stray = [i for i in d2_train.ids() if i not in d1_ids]
    if stray:
        raise ValueError(f"annotated split is not a subset of the full split (e.g. {stray[0]!r})")
    d2_ids = set(d2_train.ids())
    remainder = tuple(
        replace(inst, gold_decomposition=None)
        for inst in d1_train.instances
        if inst.id not in d2_ids
    )
    return DatasetSplit(name=SplitName.D_WEAK, instances=remainder)


def run_hard_em(
    backend: Backend,
    d1_train: DatasetSplit,
    d2_train: DatasetSplit,
    config: ExperimentConfig,
    out_dir: str | Path,
    resume: bool = False,
    on_checkpoint: Optional[Callable[[str], None]] = None,
    eval_split: Optional[DatasetSplit] = None,
    eval_fn: Optional[Callable[[Backend, ModelRef, DatasetSplit, ExperimentConfig], dict]] = None,
) -> tuple[ModelRef, HardEmState]:
    """The alternating predict/retrain loop with disk checkpoints.

    `on_checkpoint` fires after every durable write ("model_<k>",
    "predict_<k>", "predict_<k>:batch:<j>") and may raise to abort; a later
    call with resume=True continues from the last consistent checkpoint,
    refusing to resume under a different config hash. Early stopping (optional)
    uses `eval_fn` scores and stops after `early_stop_patience` iterations
    without an F1 improvement.
    """
    if config.variant is not Variant.UNIFIED_HARD_EM:
        raise ValueError(f"run_hard_em requires the unified_hard_em variant, got {config.variant.value}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / STATE_FILENAME
    config_hash = config.config_hash()
    d_weak = weak_remainder(d1_train, d2_train)

    def notify(label: str) -> None:
        if on_checkpoint is not None:
            on_checkpoint(label)

    def evaluate(model: ModelRef) -> Optional[dict]:
        if eval_split is None or eval_fn is None:
            return None
        return eval_fn(backend, model, eval_split, config)

    state: Optional[HardEmState] = None
    if resume and state_path.exists():
        saved_hash, iteration, model, history = _state_from_json(storage.load_json(state_path))
        if saved_hash != config_hash:
            raise ValueError(
                "checkpoint was produced under a different configuration; refusing to resume"
            )
        d_iter = None
        if iteration >= 1:
            d_iter, _ = _d_iter_from_raws(
                d_weak.instances, _load_raw_map(out / f"iter_{iteration}.jsonl")
            )
        state = HardEmState(iteration=iteration, model=model, d_iter=d_iter, history=history)

    if state is None:
        model0 = train_unified_multitask(backend, d2_train, config)
        record = IterationRecord(
            model_handle=model0.handle, n_predicted=0, n_fallbacks=0, scores=evaluate(model0)
        )
        state = HardEmState(iteration=0, model=model0, d_iter=None, history=(record,))
        _write_state_atomic(state_path, _state_to_json(state, config_hash))
        notify("model_0")

    best_f1 = max(
        (rec.scores["f1"] for rec in state.history if rec.scores is not None),
        default=None,
    )
    stale = 0

    for iteration in range(state.iteration + 1, config.n_iters + 1):
        d_iter, stats = predict_decompositions(
            backend,
            state.model,
            d_weak,
            config,
            checkpoint_path=out / f"iter_{iteration}.jsonl",
            on_batch=lambda j, it=iteration: notify(f"predict_{it}:batch:{j}"),
        )
        notify(f"predict_{iteration}")

        base = base_ref(backend, config) if config.from_scratch_each_iteration else state.model
        pairs = hard_em_pairs(
            d2_train, d_iter, config, token_counter(backend, base), iteration
        )
        model = _fine_tune(backend, base, pairs, config)
        scores = evaluate(model)
        record = IterationRecord(
            model_handle=model.handle,
            n_predicted=stats.n_predicted,
            n_fallbacks=stats.n_fallbacks,
            scores=scores,
        )
        state = HardEmState(
            iteration=iteration, model=model, d_iter=d_iter, history=state.history + (record,)
        )
        _write_state_atomic(state_path, _state_to_json(state, config_hash))
        notify(f"model_{iteration}")

        if config.early_stop_patience and scores is not None:
            if best_f1 is None or scores["f1"] > best_f1:
                best_f1 = scores["f1"]
                stale = 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    break

    return state.model, state


def _models_for_stage_one(models: TrainedModels, variant: Variant) -> Optional[ModelRef]:
    if variant is Variant.SEPARATE_PREDICTED:
        if models.decomposer is None:
            raise ValueError("separate_predicted inference needs a decomposer model")
        return models.decomposer
    if variant in (Variant.UNIFIED_MULTITASK, Variant.UNIFIED_HARD_EM):
        if models.unified is None:
            raise ValueError(f"{variant.value} inference needs the unified model")
        return models.unified
    return None


def _reader_model(models: TrainedModels, variant: Variant) -> ModelRef:
    if variant in (Variant.UNIFIED_MULTITASK, Variant.UNIFIED_HARD_EM):
        if models.unified is None:
            raise ValueError(f"{variant.value} inference needs the unified model")
        return models.unified
    if models.rc is None:
        raise ValueError(f"{variant.value} inference needs a reader model")
    return models.rc


def predict_split(
    backend: Backend,
    models: TrainedModels,
    instances: Sequence[QAInstance],
    config: ExperimentConfig,
    checkpoint_path: Optional[str | Path] = None,
    on_batch: Optional[Callable[[int], None]] = None,
) -> list[Prediction]:
    """Two-stage batched inference over a split, checkpointed per batch.

    Stage one produces the decomposition (generated, gold, or none depending
    on the variant); stage two generates the answer from the encoded reader
    input. Existing checkpoint lines are reused verbatim on resume.
    """
    variant = config.variant
    stage_one_model = _models_for_stage_one(models, variant)
    reader = _reader_model(models, variant)
    counter = token_counter(backend, reader)

    path = Path(checkpoint_path) if checkpoint_path is not None else None
    existing: dict[str, Prediction] = {}
    if path is not None and path.exists():
        for obj in storage.read_jsonl(path):
            pred = storage.prediction_from_json(obj)
            existing[pred.instance_id] = pred
    missing = [inst for inst in instances if inst.id not in existing]

    batch_index = 0
    for start in range(0, len(missing), config.predict_batch_size):
        batch = missing[start : start + config.predict_batch_size]

        raws = [""] * len(batch)
        zs: list[Optional[Decomposition]] = [None] * len(batch)
        if stage_one_model is not None:
            req = GenerateRequest(
                model=stage_one_model,
                inputs=tuple(encode_decomposer_input(inst.question) for inst in batch),
                decoding=config.decoding,
                max_new_tokens=config.max_new_tokens,
                seed=config.seed,
            )
            raws = list(backend.generate(req))
            zs = [
                decomposition_from_raw(raw, inst.question)[0]
                for inst, raw in zip(batch, raws)
            ]
        elif variant in (Variant.SEPARATE_GOLD, Variant.SEPARATE_AUGMENTED):
            for idx, inst in enumerate(batch):
                if inst.gold_decomposition is None:
                    raise ValueError(
                        f"instance {inst.id} has no gold decomposition for {variant.value} inference"
                    )
                zs[idx] = inst.gold_decomposition

        sources = tuple(
            encode_rc_input(inst.question, z, inst.context, config.source_budget, counter)
            for inst, z in zip(batch, zs)
        )
        answers = backend.generate(
            GenerateRequest(
                model=reader,
                inputs=sources,
                decoding=config.decoding,
                max_new_tokens=config.max_new_tokens,
                seed=config.seed,
            )
        )

        rows = []
        for inst, z, raw, answer in zip(batch, zs, raws, answers):
            pred = Prediction(
                instance_id=inst.id,
                answer_text=answer.strip(),
                decomposition=z if variant is not Variant.BASELINE_RC else None,
                raw_decoder_output=raw,
            )
            existing[inst.id] = pred
            rows.append(storage.prediction_to_json(pred))
        if path is not None:
            storage.append_jsonl(path, rows)
        batch_index += 1
        if on_batch is not None:
            on_batch(batch_index)

    return [existing[inst.id] for inst in instances]


def infer(
    backend: Backend, models: TrainedModels, instance: QAInstance, config: ExperimentConfig
) -> Prediction:
    """Single-instance convenience wrapper over predict_split."""
    return predict_split(backend, models, [instance], config)[0]
