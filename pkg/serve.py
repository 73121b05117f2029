"""
Multi-task batched inference over one frozen backbone.

Requests for different tasks share forward passes: each row's pseudotoken
positions get that task's embedding rows substituted before layer 0, and the
position-0 vectors are then routed through one head per task.
"""

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from config import settings
from corpus import LabeledExample
from encoder import HEAD_BIAS, HEAD_WEIGHT, Model, RowOverrides, backbone_fingerprint, encode_batch
from entailment import (
    BoundTemplate,
    EntailmentExample,
    pad_examples,
    predict,
    query_examples,
    rebind_template,
    reduce_prediction,
)
from errors import CompatibilityError, ConflictError, DomainError, FormatError
from models import (
    ArtifactManifest,
    InferenceRequest,
    InferenceResult,
    TaskSpec,
    Template,
    TemplateLayout,
    TrainMode,
)
from storage import read_artifact, read_manifest, write_artifact
from trainer import TaskDelta

logger = structlog.get_logger(__name__)

ROWS_TENSOR = "rows"


# ---------------------------------------------------------------------------
# Delta persistence
# ---------------------------------------------------------------------------


def save_delta(delta: TaskDelta, path: Path) -> ArtifactManifest:
    """Same manifest + blob layout as a checkpoint, ``kind`` set to delta"""
    ids = sorted(delta.rows)
    d = delta.config.d_model
    rows = np.stack([delta.rows[i] for i in ids]) if ids else np.zeros((0, d), dtype=np.float32)
    manifest = ArtifactManifest(
        format_version=settings.CHECKPOINT_FORMAT_VERSION,
        kind="delta",
        config=delta.config,
        tokenizer=settings.TOKENIZER,
        gelu=delta.config.gelu,
        fingerprint=delta.fingerprint,
        metadata={
            "task": delta.task.model_dump(mode="json"),
            "template": delta.template.model_dump(mode="json"),
            "layout": delta.layout.model_dump(mode="json"),
            "row_ids": ids,
            "mode": delta.mode.value,
            "fold": delta.fold,
            "seed": delta.seed,
        },
    )
    tensors = [(ROWS_TENSOR, rows), (HEAD_WEIGHT, delta.head_weight), (HEAD_BIAS, delta.head_bias)]
    return write_artifact(Path(path), manifest, tensors)


def load_delta(path: Path) -> TaskDelta:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.kind != "delta":
        raise FormatError(f"{path} holds a {manifest.kind}, not a task delta")
    if not manifest.fingerprint:
        raise CompatibilityError(f"{path} records no backbone fingerprint")

    meta = manifest.metadata
    try:
        ids = [int(i) for i in meta["row_ids"]]
        task = TaskSpec.model_validate(meta["task"])
        template = Template.model_validate(meta["template"])
        layout = TemplateLayout.model_validate(meta["layout"])
        mode = TrainMode(meta.get("mode", TrainMode.DE_PE.value))
    except (KeyError, ValueError, ValidationError) as e:
        raise FormatError(f"{path} has incomplete delta metadata: {e}")

    d = manifest.config.d_model
    expected = len(ids) * d + d * 2 + 2
    _, arrays = read_artifact(path, expected_floats=expected)
    rows = arrays[ROWS_TENSOR].reshape(len(ids), d)
    return TaskDelta(
        task=task,
        template=template,
        layout=layout,
        config=manifest.config,
        rows={i: rows[n].copy() for n, i in enumerate(ids)},
        head_weight=arrays[HEAD_WEIGHT].copy(),
        head_bias=arrays[HEAD_BIAS].copy(),
        fingerprint=manifest.fingerprint,
        mode=mode,
        fold=meta.get("fold"),
        seed=meta.get("seed"),
    )


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ServedTask:
    delta: TaskDelta
    bound: BoundTemplate


class DeltaStore:
    """Task deltas registered against one backbone.

    Readers take a snapshot of the task map; registration builds a new map
    under a lock and swaps it in, so a batch never sees a half-replaced task.
    """

    def __init__(self, backbone: Model):
        self.backbone = backbone
        self.fingerprint = backbone_fingerprint(backbone)
        self._tasks: Dict[str, ServedTask] = {}
        self._lock = threading.RLock()

    def snapshot(self) -> Mapping[str, ServedTask]:
        return self._tasks

    def __contains__(self, name: str) -> bool:
        return name in self._tasks

    def __len__(self) -> int:
        return len(self._tasks)

    @property
    def tasks(self) -> List[str]:
        return sorted(self._tasks)

    def get(self, name: str) -> Optional[TaskDelta]:
        served = self._tasks.get(name)
        return served.delta if served else None

    def _swap(self, name: str, served: ServedTask) -> None:
        with self._lock:
            tasks = dict(self._tasks)
            tasks[name] = served
            self._tasks = tasks


def register_task(store: DeltaStore, delta: TaskDelta, replace: bool = False) -> DeltaStore:
    if delta.fingerprint != store.fingerprint:
        raise CompatibilityError(
            f"delta {delta.name!r} was trained on backbone {delta.fingerprint[:12]}, "
            f"store serves {store.fingerprint[:12]}"
        )
    if delta.config.d_model != store.backbone.config.d_model:
        raise CompatibilityError(f"delta rows have d_model={delta.config.d_model}, backbone {store.backbone.config.d_model}")
    bound = rebind_template(delta.template, delta.layout, delta.name, store.backbone)
    with store._lock:
        if delta.name in store and not replace:
            raise ConflictError(f"task {delta.name!r} is already registered; pass replace to swap it")
        store._swap(delta.name, ServedTask(delta, bound))
    logger.info("task_registered", task=delta.name, rows=len(delta.rows), replace=replace)
    return store


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _as_example(request: InferenceRequest) -> LabeledExample:
    return LabeledExample(s1=request.s1, s2=request.s2, label=0, id=request.id)


def _failure(request: InferenceRequest, message: str) -> InferenceResult:
    return InferenceResult(id=request.id, task=request.task, error=message)


def batch_infer(store: DeltaStore, requests: Sequence[InferenceRequest], max_batch: int = None) -> List[InferenceResult]:
    """Results in request order; failures become per-request error records"""
    max_batch = max_batch or settings.MAX_BATCH
    tasks = store.snapshot()
    backbone = store.backbone

    results: List[Optional[InferenceResult]] = [None] * len(requests)
    # (request index, task name, rendered input)
    rows: List[Tuple[int, str, EntailmentExample]] = []
    for r, request in enumerate(requests):
        served = tasks.get(request.task)
        if served is None:
            results[r] = _failure(request, f"task {request.task!r} is not registered")
            continue
        try:
            rendered = query_examples(served.bound, _as_example(request), served.delta.task.num_classes)
        except DomainError as e:
            results[r] = _failure(request, str(e))
            continue
        rows.extend((r, request.task, ex) for ex in rendered)

    logits = np.zeros((len(rows), 2), dtype=np.float64)
    for start in range(0, len(rows), max_batch):
        chunk = rows[start:start + max_batch]
        examples = [ex for _, _, ex in chunk]
        mapping = {}
        for b, (_, name, ex) in enumerate(chunk):
            delta_rows = tasks[name].delta.rows
            for pos in ex.pseudo_positions:
                mapping[(b, pos)] = delta_rows[ex.ids[pos]]
        overrides = RowOverrides.from_mapping(mapping, backbone.dtype)
        hidden = encode_batch(backbone, pad_examples(examples), overrides)
        cls = hidden.data[:, 0, :]

        groups: Dict[str, List[int]] = OrderedDict()
        for b, (_, name, _) in enumerate(chunk):
            groups.setdefault(name, []).append(b)
        for name, members in groups.items():
            delta = tasks[name].delta
            idx = np.asarray(members)
            logits[start + idx] = cls[idx] @ delta.head_weight + delta.head_bias

    spans: Dict[int, List[int]] = OrderedDict()
    for n, (r, _, _) in enumerate(rows):
        spans.setdefault(r, []).append(n)
    for r, members in spans.items():
        request = requests[r]
        served = tasks[request.task]
        prediction = reduce_prediction(logits[members], served.bound.multiclass)
        results[r] = InferenceResult(
            id=request.id,
            task=request.task,
            class_id=prediction.class_id,
            probabilities=prediction.probabilities,
            logits=prediction.logits,
        )

    failed = sum(1 for res in results if res.error)
    logger.info("batch_inferred", requests=len(requests), rows=len(rows), failed=failed, tasks=len(set(n for _, n, _ in rows)))
    return results


def sequential_infer(store: DeltaStore, requests: Sequence[InferenceRequest]) -> List[InferenceResult]:
    """One request at a time through ``entailment.predict``; results in request order"""
    tasks = store.snapshot()
    results: List[InferenceResult] = []
    for request in requests:
        served = tasks.get(request.task)
        if served is None:
            results.append(_failure(request, f"task {request.task!r} is not registered"))
            continue
        try:
            prediction = predict(store.backbone, served.delta, _as_example(request))
        except DomainError as e:
            results.append(_failure(request, str(e)))
            continue
        results.append(InferenceResult(
            id=request.id,
            task=request.task,
            class_id=prediction.class_id,
            probabilities=prediction.probabilities,
            logits=prediction.logits,
        ))
    return results


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def read_requests(path: Path) -> List[InferenceRequest]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path} not found")
    requests = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            requests.append(InferenceRequest.model_validate_json(line))
        except ValidationError as e:
            raise FormatError(f"{path}:{lineno}: malformed request: {e.errors()[0]['msg']}")
    return requests


def write_results(path: Path, results: Sequence[InferenceResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            record = result.model_dump(by_alias=True, exclude_none=True)
            if result.error:
                record.pop("probabilities", None)
                record.pop("logits", None)
            fh.write(json.dumps(record) + "\n")
