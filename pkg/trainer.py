"""
Training stages and the k-shot evaluation protocol.

MLM pretraining manufactures the base checkpoint, intermediate training
fine-tunes it on entailment pairs, and few-shot training adapts a copy of a
checkpoint per fold under a ParameterPartition. Evaluation, grid search and
the sweep harnesses sit on top of ``train_fewshot``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from compute import AdamWState, GradientTape, Tensor, adamw_step, cross_entropy
from corpus import LabeledDataset, LabeledExample
from encoder import (
    HEAD_BIAS,
    HEAD_WEIGHT,
    Model,
    ParameterPartition,
    backbone_fingerprint,
    encode_batch,
    entail_logits,
    format_ratio,
    hash_units,
    mlm_logits,
    param_shapes,
    partition_parameters,
    trainable_ratio,
)
from entailment import (
    BoundTemplate,
    EntailmentDataset,
    EntailmentExample,
    bind_template,
    build_dataset,
    pad_examples,
    predict_examples,
    rebind_template,
    symmetric_augment,
    template_preset,
)
from errors import ConfigError, InputError, StateError
from models import (
    EncoderConfig,
    FewShotReport,
    FoldSpec,
    GridEntry,
    GridReport,
    HyperparamSpace,
    Hyperparams,
    LineageEntry,
    Metric,
    MetricReport,
    PartitionMode,
    SweepEntry,
    SweepReport,
    TaskSpec,
    Template,
    TemplateLayout,
    TrainMode,
)
from vocab import CLS_ID, FIRST_ORDINARY_ID, MASK_ID, SEP_ID, Vocabulary, tokenize

logger = structlog.get_logger(__name__)

MASK_RATE = 0.15
MIN_IMPROVEMENT = 1e-4
MAX_PRETRAIN_PASSES = 20
SWEEP_COUNTS = (0, 2, 5, 20)


# ---------------------------------------------------------------------------
# Task deltas
# ---------------------------------------------------------------------------


@dataclass
class TaskDelta:
    """Everything a task adds on top of a shared backbone"""

    task: TaskSpec
    template: Template
    layout: TemplateLayout
    config: EncoderConfig
    rows: Dict[int, np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    fingerprint: str
    mode: TrainMode = TrainMode.DE_PE
    fold: Optional[int] = None
    seed: Optional[int] = None

    @property
    def name(self) -> str:
        return self.task.name

    @property
    def head(self) -> Tuple[Tensor, Tensor]:
        return Tensor(self.head_weight), Tensor(self.head_bias)

    @property
    def parameter_count(self) -> int:
        return len(self.rows) * self.config.d_model + self.head_weight.size + self.head_bias.size


def extract_delta(
    model: Model,
    bound: BoundTemplate,
    task: TaskSpec,
    mode: TrainMode,
    fold: Optional[int] = None,
    seed: Optional[int] = None,
) -> TaskDelta:
    table = model.table.data
    ids = bound.layout.trainable_ids(model.config.vocab_size)
    return TaskDelta(
        task=task,
        template=bound.template,
        layout=bound.layout,
        config=model.config,
        rows={i: table[i].astype(np.float32) for i in ids},
        head_weight=model.params[HEAD_WEIGHT].data.astype(np.float32),
        head_bias=model.params[HEAD_BIAS].data.astype(np.float32),
        fingerprint=backbone_fingerprint(model),
        mode=mode,
        fold=fold,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Optimisation core
# ---------------------------------------------------------------------------


def optimizer_units(model: Model, partition: ParameterPartition) -> List[str]:
    """Units handed to the optimizer; full mode works on whole tensors"""
    if partition.mode == PartitionMode.FULL:
        return [name for name, _ in param_shapes(model.config)]
    return sorted(partition.trainable)


def compute_gradients(model: Model, units: Sequence[str], loss_fn: Callable[[], Tensor]) -> Tuple[float, Dict[str, Tensor]]:
    with GradientTape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, units, params=model.params)
    return loss.item(), grads


def apply_gradients(
    model: Model,
    units: Sequence[str],
    grads: Mapping[str, Tensor],
    state: AdamWState,
    hp: Hyperparams,
) -> AdamWState:
    params = {u: Tensor(model.unit_data(u), name=u) for u in units}
    updated, state = adamw_step(params, grads, state, hp.learning_rate, hp.weight_decay)
    for unit, tensor in updated.items():
        model.assign_unit(unit, tensor.data)
    return state


def _accumulate(total: Dict[str, np.ndarray], grads: Mapping[str, Tensor]) -> None:
    for unit, g in grads.items():
        total[unit] = g.data.copy() if unit not in total else total[unit] + g.data


def _averaged(total: Dict[str, np.ndarray], count: int) -> Dict[str, Tensor]:
    return {unit: Tensor(g / g.dtype.type(count)) for unit, g in total.items()}


def entailment_loss(model: Model, batch: Sequence[EntailmentExample], rng: Optional[np.random.Generator] = None) -> Tensor:
    dropout_rng = rng if model.config.dropout > 0 else None
    hidden = encode_batch(model, pad_examples(batch), rng=dropout_rng)
    return cross_entropy(entail_logits(model, hidden), [ex.target for ex in batch])


def fit_entailment(
    model: Model,
    dataset: EntailmentDataset,
    units: Sequence[str],
    hp: Hyperparams,
    rng: np.random.Generator,
    **context,
) -> List[float]:
    """Epoch loop with gradient accumulation and early stopping on the training loss"""
    n = len(dataset)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    state = AdamWState()
    losses: List[float] = []
    best = math.inf
    stale = 0

    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        batches = [order[i:i + hp.batch_size] for i in range(0, n, hp.batch_size)]
        total_loss = 0.0
        for start in range(0, len(batches), hp.grad_accum):
            group = batches[start:start + hp.grad_accum]
            summed: Dict[str, np.ndarray] = {}
            for idx in group:
                batch = [dataset.examples[i] for i in idx]
                loss, grads = compute_gradients(model, units, lambda: entailment_loss(model, batch, rng))
                total_loss += loss * len(batch)
                _accumulate(summed, grads)
            state = apply_gradients(model, units, _averaged(summed, len(group)), state, hp)

        epoch_loss = total_loss / n
        losses.append(epoch_loss)
        logger.debug("epoch_finished", epoch=epoch, loss=round(epoch_loss, 6), examples_seen=n, **context)
        if epoch_loss < best - MIN_IMPROVEMENT:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= hp.patience:
                break
    return losses


# ---------------------------------------------------------------------------
# Masked-LM pretraining
# ---------------------------------------------------------------------------


@dataclass
class MlmBatch:
    ids: np.ndarray
    batch_index: np.ndarray
    positions: np.ndarray
    targets: np.ndarray


def prepare_mlm_sequences(vocab: Vocabulary, corpus: Sequence[str], max_seq: int) -> List[List[int]]:
    """[CLS] tokens [SEP] per document; documents with no ordinary token are dropped"""
    sequences = []
    for document in corpus:
        tokens = tokenize(vocab, document)[: max_seq - 2]
        if any(t >= FIRST_ORDINARY_ID for t in tokens):
            sequences.append([CLS_ID, *tokens, SEP_ID])
    return sequences


def mask_count(length: int) -> int:
    return max(1, int(math.floor(MASK_RATE * length)))


def mask_sequences(
    sequences: Sequence[Sequence[int]],
    rng: np.random.Generator,
    vocab_size: int,
    strategy: str = "standard",
) -> MlmBatch:
    """Pick floor(0.15 L) (at least one) ordinary positions per sequence and corrupt them.

    ``standard`` replaces 80% with [MASK], 10% with a random ordinary token and
    leaves 10% unchanged; ``mask_only`` always writes [MASK].
    """
    if strategy not in ("standard", "mask_only"):
        raise ConfigError(f"unknown mask strategy {strategy!r}")
    length = max(len(s) for s in sequences)
    ids = np.zeros((len(sequences), length), dtype=np.int64)
    batch_index, positions, targets = [], [], []
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
        candidates = [i for i, t in enumerate(seq) if t >= FIRST_ORDINARY_ID]
        count = min(mask_count(len(seq)), len(candidates))
        chosen = np.sort(rng.choice(candidates, size=count, replace=False))
        for pos in chosen:
            targets.append(seq[pos])
            batch_index.append(row)
            positions.append(int(pos))
            draw = rng.random()
            if strategy == "mask_only" or draw < 0.8:
                ids[row, pos] = MASK_ID
            elif draw < 0.9:
                ids[row, pos] = int(rng.integers(FIRST_ORDINARY_ID, vocab_size))
    return MlmBatch(
        ids=ids,
        batch_index=np.array(batch_index, dtype=np.int64),
        positions=np.array(positions, dtype=np.int64),
        targets=np.array(targets, dtype=np.int64),
    )


def mlm_loss(model: Model, batch: MlmBatch) -> Tensor:
    hidden = encode_batch(model, batch.ids)
    return cross_entropy(mlm_logits(model, hidden, batch.batch_index, batch.positions), batch.targets)


def evaluate_mlm(model: Model, corpus: Sequence[str], seed: int, batch_size: int = 32) -> float:
    """MLM loss on a fixed masking of the first ``batch_size`` usable documents"""
    sequences = prepare_mlm_sequences(model.vocab, corpus, model.config.max_seq)[:batch_size]
    if not sequences:
        raise InputError("corpus holds no usable sequence")
    batch = mask_sequences(sequences, np.random.default_rng(seed), model.config.vocab_size)
    return mlm_loss(model, batch).item()


@dataclass
class PretrainResult:
    model: Model
    losses: List[float]
    initial_loss: float
    final_loss: float


def pretrain_mlm(
    model: Model,
    corpus: Sequence[str],
    steps: int,
    hp: Hyperparams,
    mask_strategy: str = "standard",
) -> PretrainResult:
    """Masked-token prediction with every parameter trainable; returns a trained copy"""
    if model.vocab is None:
        raise StateError("pretraining needs a model built with a vocabulary")
    sequences = prepare_mlm_sequences(model.vocab, corpus, model.config.max_seq)
    if len(sequences) < hp.batch_size:
        raise InputError(
            f"corpus holds {len(sequences)} usable sequences, one batch needs {hp.batch_size}"
        )
    if steps < 1:
        raise InputError(f"steps must be positive, got {steps}")
    needed = steps * hp.batch_size * hp.grad_accum
    if needed > MAX_PRETRAIN_PASSES * len(sequences):
        raise InputError(
            f"corpus of {len(sequences)} sequences is too small for {steps} steps "
            f"({needed} sequences drawn, at most {MAX_PRETRAIN_PASSES} passes)"
        )

    work = model.copy()
    units = [name for name, _ in param_shapes(work.config)]
    rng = np.random.default_rng(hp.seed)
    initial_loss = evaluate_mlm(work, corpus, hp.seed)
    state = AdamWState()
    losses: List[float] = []
    order = rng.permutation(len(sequences))
    cursor = 0

    for step in range(steps):
        summed: Dict[str, np.ndarray] = {}
        step_loss = 0.0
        for _ in range(hp.grad_accum):
            if cursor + hp.batch_size > len(order):
                order = rng.permutation(len(sequences))
                cursor = 0
            picked = [sequences[i] for i in order[cursor:cursor + hp.batch_size]]
            cursor += hp.batch_size
            batch = mask_sequences(picked, rng, work.config.vocab_size, mask_strategy)
            loss, grads = compute_gradients(work, units, lambda: mlm_loss(work, batch))
            step_loss += loss / hp.grad_accum
            _accumulate(summed, grads)
        state = apply_gradients(work, units, _averaged(summed, hp.grad_accum), state, hp)
        losses.append(step_loss)
        if step % 50 == 0 or step == steps - 1:
            logger.info("pretrain_step", step=step, loss=round(step_loss, 4))

    final_loss = evaluate_mlm(work, corpus, hp.seed)
    fingerprint = backbone_fingerprint(work)
    work.lineage.append(LineageEntry(
        stage="pretrain",
        fingerprint=fingerprint,
        seed=hp.seed,
        detail={"steps": steps, "initial_loss": initial_loss, "final_loss": final_loss, "mask_strategy": mask_strategy},
    ))
    logger.info("pretraining_finished", steps=steps, initial_loss=initial_loss, final_loss=final_loss)
    return PretrainResult(work, losses, initial_loss, final_loss)


# ---------------------------------------------------------------------------
# Intermediate entailment training
# ---------------------------------------------------------------------------


@dataclass
class IntermediateResult:
    model: Model
    losses: List[float]
    accuracy: Optional[float] = None


def intermediate_train(
    model: Model,
    train: Sequence[LabeledExample],
    hp: Hyperparams,
    test: Sequence[LabeledExample] = (),
    template: Optional[Template] = None,
) -> IntermediateResult:
    """Full fine-tuning on [CLS] premise [SEP] hypothesis pairs; lineage grows by one entry"""
    work = model.copy()
    parent = backbone_fingerprint(model)
    template = template or template_preset("pair", n_pseudotokens=0)
    task = TaskSpec(name="nli", num_classes=2)
    bound = bind_template(work, template, task.name, seed=hp.seed)
    dataset = build_dataset(list(train), bound, 2)
    partition = partition_parameters(work, PartitionMode.FULL)
    rng = np.random.default_rng(hp.seed)
    losses = fit_entailment(work, dataset, optimizer_units(work, partition), hp, rng, stage="intermediate")

    accuracy = None
    if test:
        predictions = predict_examples(work, bound, list(test), 2)
        accuracy = metric_score(Metric.ACCURACY, [p.class_id for p in predictions], [ex.label for ex in test])

    fingerprint = backbone_fingerprint(work)
    work.lineage.append(LineageEntry(
        stage="intermediate",
        fingerprint=fingerprint,
        parent=parent,
        seed=hp.seed,
        detail={"epochs": len(losses), "final_loss": losses[-1], "accuracy": accuracy},
    ))
    logger.info("intermediate_finished", epochs=len(losses), loss=losses[-1], accuracy=accuracy)
    return IntermediateResult(work, losses, accuracy)


def verify_lineage(model: Model) -> bool:
    """Each stage's parent is the previous stage's fingerprint and the last matches the weights"""
    entries = model.lineage
    for previous, current in zip(entries, entries[1:]):
        if current.parent != previous.fingerprint:
            return False
    return not entries or entries[-1].fingerprint == backbone_fingerprint(model)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


def sample_folds(
    dataset: LabeledDataset,
    k: int,
    n_folds: int = 5,
    seed: int = 7,
    dev_fold: bool = False,
) -> List[FoldSpec]:
    """Stratified, pairwise-disjoint k-per-class folds from the train split.

    ``dev_fold`` adds one more disjoint fold with role ``dev``.
    """
    if k < 1 or n_folds < 1:
        raise InputError(f"k and n_folds must be positive, got k={k}, n_folds={n_folds}")
    test_ids = {ex.id for ex in dataset.test}
    overlap = [ex.id for ex in dataset.train if ex.id in test_ids]
    if overlap:
        raise InputError(f"train and test splits share ids, e.g. {overlap[0]!r}")

    total = n_folds + (1 if dev_fold else 0)
    rng = np.random.default_rng(seed)
    per_class: Dict[int, List[str]] = {}
    for c in range(dataset.num_classes):
        ids = [ex.id for ex in dataset.train if ex.label == c]
        required = total * k
        if len(ids) < required:
            raise InputError(
                f"class {c} needs {required} training examples ({total} folds x k={k}), only {len(ids)} available"
            )
        per_class[c] = [ids[i] for i in rng.permutation(len(ids))[:required]]

    folds = []
    for i in range(total):
        folds.append(FoldSpec(
            index=i,
            role="dev" if i >= n_folds else "train",
            train_ids={c: ids[i * k:(i + 1) * k] for c, ids in per_class.items()},
            test_split=f"{dataset.name}/test",
            seed=seed + i,
        ))
    logger.debug("folds_sampled", dataset=dataset.name, k=k, folds=n_folds, dev=dev_fold)
    return folds


# ---------------------------------------------------------------------------
# Few-shot training
# ---------------------------------------------------------------------------


@dataclass
class FewShotResult:
    delta: TaskDelta
    model: Model
    partition: ParameterPartition
    losses: List[float]
    train_accuracy: float
    examples_per_epoch: int
    frozen_hash: Optional[str] = None

    @property
    def ratio(self) -> Fraction:
        return trainable_ratio(self.partition)


def train_fewshot(
    model: Model,
    task: TaskSpec,
    fold: FoldSpec,
    pool: Mapping[str, LabeledExample],
    template: Template,
    mode: Union[TrainMode, str],
    hp: Hyperparams,
    symmetric: bool = False,
) -> FewShotResult:
    """Adapt a copy of ``model`` to one fold; DE_PE and HEAD leave every frozen byte untouched"""
    try:
        mode = TrainMode(mode)
    except ValueError:
        raise ConfigError(f"unknown training mode {mode!r}")
    issues = task.issues()
    if issues:
        raise ConfigError("; ".join(issues))
    missing = [i for i in fold.all_ids if i not in pool]
    if missing:
        raise InputError(f"fold {fold.index} references unknown example id {missing[0]!r}")

    work = model.copy()
    bound = bind_template(work, template, task.name, fold.seed, task.num_classes, symmetric)
    sources = [pool[i] for i in fold.all_ids]
    dataset = build_dataset(sources, bound, task.num_classes)
    if symmetric:
        dataset = symmetric_augment(dataset, bound)

    partition = partition_parameters(work, mode.partition, task.name)
    units = optimizer_units(work, partition)
    frozen_before = hash_units(work, partition.frozen) if mode != TrainMode.DE else None

    rng = np.random.default_rng(fold.seed)
    losses = fit_entailment(work, dataset, units, hp, rng, task=task.name, fold=fold.index, mode=mode.value)

    if frozen_before is not None and hash_units(work, partition.frozen) != frozen_before:
        raise StateError(f"frozen parameters changed while training {task.name} fold {fold.index}")

    predictions = predict_examples(work, bound, sources, task.num_classes)
    train_accuracy = metric_score(Metric.ACCURACY, [p.class_id for p in predictions], [ex.label for ex in sources])
    delta = extract_delta(work, bound, task, mode, fold=fold.index, seed=fold.seed)

    logger.info(
        "fold_trained",
        task=task.name,
        fold=fold.index,
        mode=mode.value,
        epochs=len(losses),
        loss=round(losses[-1], 6),
        train_accuracy=train_accuracy,
        examples_seen_per_epoch=len(dataset),
        trainable=partition.trainable_count,
    )
    return FewShotResult(delta, work, partition, losses, train_accuracy, len(dataset), frozen_before)


def _train_fold_job(args) -> FewShotResult:
    return train_fewshot(*args)


def train_folds(
    model: Model,
    task: TaskSpec,
    folds: Sequence[FoldSpec],
    pool: Mapping[str, LabeledExample],
    template: Template,
    mode: TrainMode,
    hp: Hyperparams,
    symmetric: bool = False,
    parallel: bool = False,
) -> List[FewShotResult]:
    jobs = [(model, task, fold, dict(pool), template, mode, hp, symmetric) for fold in folds]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool_executor:
            return list(pool_executor.map(_train_fold_job, jobs))
    return [_train_fold_job(job) for job in jobs]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def metric_score(metric: Metric, predicted: Sequence[int], gold: Sequence[int]) -> float:
    """Accuracy, or F1 of class 1, as a percentage"""
    predicted = np.asarray(predicted)
    gold = np.asarray(gold)
    if predicted.shape != gold.shape:
        raise InputError(f"{predicted.size} predictions for {gold.size} gold labels")
    if gold.size == 0:
        return 0.0
    if metric == Metric.ACCURACY:
        return float(100.0 * np.mean(predicted == gold))
    tp = int(np.sum((predicted == 1) & (gold == 1)))
    fp = int(np.sum((predicted == 1) & (gold != 1)))
    fn = int(np.sum((predicted != 1) & (gold == 1)))
    if tp == 0:
        return 0.0
    return float(100.0 * 2 * tp / (2 * tp + fp + fn))


def majority_score(metric: Metric, gold: Sequence[int], num_classes: int) -> float:
    """Score of always predicting the most frequent test class (lowest class on ties)"""
    counts = np.bincount(np.asarray(gold, dtype=np.int64), minlength=num_classes)
    majority = int(np.argmax(counts))
    return metric_score(metric, [majority] * len(gold), gold)


def summarize_scores(scores: Sequence[float]) -> Tuple[float, float, str]:
    """Mean, sample standard deviation and the "mean (std)" text"""
    values = np.asarray(scores, dtype=np.float64)
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return mean, std, f"{mean:.1f} ({std:.1f})"


def score_delta(
    model: Model,
    delta: TaskDelta,
    examples: Sequence[LabeledExample],
    metric: Metric,
    max_batch: int = 64,
) -> float:
    bound = rebind_template(delta.template, delta.layout, delta.task.name, model)
    predictions = predict_examples(model, bound, examples, delta.task.num_classes, delta.rows, delta.head, max_batch)
    return metric_score(metric, [p.class_id for p in predictions], [ex.label for ex in examples])


def evaluate(
    model: Model,
    deltas: Sequence[TaskDelta],
    task: TaskSpec,
    test: Sequence[LabeledExample],
    models: Optional[Sequence[Model]] = None,
) -> MetricReport:
    """Per-fold test scores with mean and sample std; ``models`` supplies per-fold backbones for DE"""
    issues = task.issues()
    if issues:
        raise ConfigError("; ".join(issues))
    if not deltas:
        raise InputError("evaluate needs at least one task delta")
    if models is not None and len(models) != len(deltas):
        raise InputError(f"{len(models)} fold models for {len(deltas)} deltas")

    scores = []
    for i, delta in enumerate(deltas):
        backbone = models[i] if models is not None else model
        fingerprint = backbone_fingerprint(backbone)
        if delta.fingerprint != fingerprint:
            raise StateError(
                f"delta for fold {delta.fold} was trained on backbone {delta.fingerprint[:12]}, "
                f"evaluating on {fingerprint[:12]}"
            )
        if delta.task.name != task.name:
            raise ConfigError(f"delta belongs to task {delta.task.name!r}, not {task.name!r}")
        scores.append(score_delta(backbone, delta, test, task.metric))

    mean, std, formatted = summarize_scores(scores)
    majority = majority_score(task.metric, [ex.label for ex in test], task.num_classes)
    logger.info("evaluation_finished", task=task.name, metric=task.metric.value, result=formatted, majority=majority)
    return MetricReport(
        task=task.name,
        metric=task.metric,
        scores=scores,
        mean=mean,
        std=std,
        formatted=formatted,
        majority=majority,
    )


# ---------------------------------------------------------------------------
# Protocol runs
# ---------------------------------------------------------------------------


@dataclass
class FewShotRun:
    folds: List[FoldSpec]
    results: List[FewShotResult]
    report: FewShotReport


def run_fewshot(
    model: Model,
    task: TaskSpec,
    dataset: LabeledDataset,
    template: Template,
    mode: Union[TrainMode, str],
    hp: Hyperparams,
    k: int,
    n_folds: int = 5,
    seed: int = 7,
    symmetric: bool = False,
    parallel: bool = False,
) -> FewShotRun:
    """Sample folds, train one delta per fold and evaluate them on the test split"""
    mode = TrainMode(mode)
    folds = sample_folds(dataset, k, n_folds, seed)
    results = train_folds(model, task, folds, dataset.by_id(), template, mode, hp, symmetric, parallel)
    models = [r.model for r in results] if mode == TrainMode.DE else None
    metrics = evaluate(model, [r.delta for r in results], task, dataset.test, models)
    report = FewShotReport(
        task=task.name,
        mode=mode,
        k=k,
        symmetric=symmetric,
        n_pseudotokens=template.n_pseudotokens,
        scores=metrics.scores,
        mean=metrics.mean,
        std=metrics.std,
        formatted=metrics.formatted,
        majority=metrics.majority,
        metric=task.metric,
        hyperparams=hp,
        seeds=[fold.seed for fold in folds],
        trainable_ratio=format_ratio(results[0].ratio),
        lineage=model.lineage,
    )
    return FewShotRun(folds, results, report)


def grid_search(
    space: HyperparamSpace,
    model: Model,
    task: TaskSpec,
    dataset: LabeledDataset,
    template: Template,
    mode: Union[TrainMode, str],
    k: int,
    n_folds: int = 5,
    seed: int = 7,
    base: Optional[Hyperparams] = None,
    symmetric: bool = False,
) -> GridReport:
    """Mean dev-fold accuracy per grid point; the first best point in enumeration order wins"""
    mode = TrainMode(mode)
    points = space.points(base or Hyperparams(seed=seed))
    if not points:
        raise InputError("hyperparameter space is empty")
    if len(points) == 1:
        logger.info("grid_singleton", task=task.name)
        return GridReport(task=task.name, mode=mode, best=points[0], entries=[])

    folds = sample_folds(dataset, k, n_folds, seed, dev_fold=True)
    pool = dataset.by_id()
    dev = [pool[i] for i in folds[-1].all_ids]
    training_folds = folds[:-1]

    entries: List[GridEntry] = []
    best: Optional[GridEntry] = None
    for hp in points:
        fold_scores = []
        for fold in training_folds:
            result = train_fewshot(model, task, fold, pool, template, mode, hp, symmetric)
            fold_scores.append(score_delta(result.model, result.delta, dev, Metric.ACCURACY))
        entry = GridEntry(hyperparams=hp, fold_scores=fold_scores, mean_score=float(np.mean(fold_scores)))
        entries.append(entry)
        if best is None or entry.mean_score > best.mean_score:
            best = entry
        logger.info(
            "grid_point_scored",
            learning_rate=hp.learning_rate,
            weight_decay=hp.weight_decay,
            batch_size=hp.batch_size,
            grad_accum=hp.grad_accum,
            mean_score=entry.mean_score,
        )
    return GridReport(task=task.name, mode=mode, best=best.hyperparams, entries=entries)


def pseudotoken_sweep(
    model: Model,
    task: TaskSpec,
    dataset: LabeledDataset,
    template: Template,
    mode: Union[TrainMode, str],
    hp: Hyperparams,
    k: int,
    n_folds: int = 5,
    seed: int = 7,
    counts: Sequence[int] = SWEEP_COUNTS,
    symmetric: bool = False,
) -> SweepReport:
    """The few-shot protocol once per pseudotoken count"""
    mode = TrainMode(mode)
    entries = []
    for count in counts:
        variant = template.model_copy(update={"n_pseudotokens": count})
        run = run_fewshot(model, task, dataset, variant, mode, hp, k, n_folds, seed, symmetric)
        report = run.report
        entries.append(SweepEntry(
            n_pseudotokens=count,
            report=MetricReport(
                task=task.name,
                metric=task.metric,
                scores=report.scores,
                mean=report.mean,
                std=report.std,
                formatted=report.formatted,
                majority=report.majority,
            ),
        ))
        logger.info("sweep_point", n_pseudotokens=count, result=report.formatted)
    return SweepReport(task=task.name, mode=mode, k=k, entries=entries)


def compare_checkpoints(
    models: Mapping[str, Model],
    task: TaskSpec,
    dataset: LabeledDataset,
    template: Template,
    mode: Union[TrainMode, str],
    hp: Hyperparams,
    k: int,
    n_folds: int = 5,
    seed: int = 7,
    symmetric: bool = False,
) -> Dict[str, FewShotReport]:
    """Identical folds and seeds from each checkpoint"""
    reports = {}
    for label, model in models.items():
        reports[label] = run_fewshot(model, task, dataset, template, mode, hp, k, n_folds, seed, symmetric).report
        logger.info("checkpoint_compared", checkpoint=label, result=reports[label].formatted)
    return reports
