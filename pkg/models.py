"""
Unified data models for the entailment toolkit (configs, templates, protocol, reports).
"""
from enum import Enum
from itertools import product
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

# === Encoder ===

class EncoderConfig(BaseModel):
    """Transformer encoder hyperparameters; recorded in every checkpoint manifest."""
    model_config = ConfigDict(frozen=True)

    vocab_size: int
    pseudotoken_capacity: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 64
    dropout: float = 0.0
    gelu: Literal["tanh", "erf"] = "tanh"
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    @property
    def table_rows(self) -> int:
        return self.vocab_size + self.pseudotoken_capacity

    def issues(self) -> List[str]:
        issues = []
        if self.d_model <= 0 or self.n_heads <= 0:
            issues.append("d_model and n_heads must be positive")
        elif self.d_model % self.n_heads != 0:
            issues.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 5:
            issues.append(f"vocab_size={self.vocab_size} cannot hold the 5 special tokens")
        if self.pseudotoken_capacity < 0:
            issues.append("pseudotoken_capacity must not be negative")
        if self.n_layers < 0 or self.d_ff <= 0 or self.max_seq <= 0:
            issues.append("n_layers, d_ff and max_seq must be positive")
        if not 0.0 <= self.dropout < 1.0:
            issues.append(f"dropout={self.dropout} must lie in [0, 1)")
        if self.layer_norm_eps <= 0:
            issues.append("layer_norm_eps must be positive")
        return issues


class PartitionMode(str, Enum):
    """Which parameters a run may change."""
    FULL = "full"
    EFFICIENT = "efficient"
    HEAD_ONLY = "head_only"


class TrainMode(str, Enum):
    """Few-shot training variants."""
    DE = "de"
    DE_PE = "de-pe"
    HEAD = "head"

    @property
    def partition(self) -> PartitionMode:
        return {
            TrainMode.DE: PartitionMode.FULL,
            TrainMode.DE_PE: PartitionMode.EFFICIENT,
            TrainMode.HEAD: PartitionMode.HEAD_ONLY,
        }[self]

# === Templates ===

class TemplateKind(str, Enum):
    SINGLE_SENTENCE = "single_sentence"
    SENTENCE_PAIR = "sentence_pair"


class Template(BaseModel):
    """Entailment prompt: S1 [SEP] T0..Tj prompt_words label_word (or S2 for pairs)."""
    model_config = ConfigDict(frozen=True)

    kind: TemplateKind = TemplateKind.SINGLE_SENTENCE
    prompt_words: List[str] = Field(default_factory=lambda: ["it", "was"])
    label_word: Optional[str] = "great"
    negative_label_word: Optional[str] = "terrible"
    class_label_words: List[str] = Field(default_factory=list)
    n_pseudotokens: int = Field(5, ge=0)
    train_prompt_words: bool = True
    train_label_word: bool = True
    pseudotoken_init: Literal["random", "copy"] = "random"
    pseudotoken_copy_token: Optional[str] = None
    copy_init: Literal["copy", "random"] = "copy"

    @model_validator(mode="after")
    def _check_kind(self) -> "Template":
        if self.kind == TemplateKind.SENTENCE_PAIR:
            if self.label_word or self.negative_label_word or self.class_label_words:
                raise ValueError("sentence_pair templates carry no label words")
            if self.prompt_words:
                raise ValueError("sentence_pair templates carry no prompt words")
        if self.pseudotoken_init == "copy" and not self.pseudotoken_copy_token:
            raise ValueError("pseudotoken_init='copy' needs pseudotoken_copy_token")
        return self

    def description_texts(self) -> List[str]:
        """Every label description this template may render, in a fixed order."""
        texts: List[str] = []
        for text in [self.label_word, self.negative_label_word, *self.class_label_words]:
            if text and text not in texts:
                texts.append(text)
        return texts


class TemplateLayout(BaseModel):
    """Token ids a bound template renders: pseudotokens, prompt words, label descriptions."""
    pseudo_ids: List[int] = Field(default_factory=list)
    prompt_ids: List[int] = Field(default_factory=list)
    label_ids: Dict[str, List[int]] = Field(default_factory=dict)

    def trainable_ids(self, vocab_size: int) -> List[int]:
        ids = list(self.pseudo_ids) + list(self.prompt_ids)
        for label in self.label_ids.values():
            ids.extend(label)
        return sorted({i for i in ids if i >= vocab_size})


class LabelDescription(BaseModel):
    """Hypothesis text p and the class it asserts (polarity 1 = p1, 0 = p-1)."""
    model_config = ConfigDict(frozen=True)

    text: str
    polarity: int

# === Tasks and data ===

class TaskKind(str, Enum):
    SINGLE = "single"
    PAIR = "pair"


class Metric(str, Enum):
    ACCURACY = "accuracy"
    F1 = "f1"


class TaskSpec(BaseModel):
    """A classification task: name, input kind, class count and reported metric."""
    name: str
    kind: TaskKind = TaskKind.SINGLE
    num_classes: int = Field(2, ge=2)
    metric: Metric = Metric.ACCURACY
    template_file: Optional[str] = None

    def issues(self) -> List[str]:
        if self.metric == Metric.F1 and self.num_classes != 2:
            return [f"metric f1 needs a binary task, {self.name} has {self.num_classes} classes"]
        return []


class JsonlRecord(BaseModel):
    """One line of a dataset file."""
    model_config = ConfigDict(extra="forbid")

    s1: str
    s2: Optional[str] = None
    label: int
    id: Optional[str] = None

# === Protocol ===

class Hyperparams(BaseModel):
    """Optimizer and loop settings for one training run."""
    model_config = ConfigDict(frozen=True)

    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = Field(8, ge=1)
    grad_accum: int = Field(1, ge=1)
    epochs: int = Field(20, ge=1)
    patience: int = Field(5, ge=1)
    seed: int = 7


class HyperparamSpace(BaseModel):
    """Grid of candidate hyperparameters, enumerated in tie-break order."""
    learning_rates: List[float] = Field(default_factory=lambda: [1e-5, 3e-5, 1e-4])
    weight_decays: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1])
    batch_sizes: List[int] = Field(default_factory=lambda: [8, 16])
    grad_accums: List[int] = Field(default_factory=lambda: [1, 2])

    def points(self, base: Hyperparams) -> List[Hyperparams]:
        grid = product(
            sorted(set(self.learning_rates)),
            sorted(set(self.weight_decays)),
            sorted(set(self.batch_sizes)),
            sorted(set(self.grad_accums)),
        )
        return [
            base.model_copy(update={
                "learning_rate": lr,
                "weight_decay": wd,
                "batch_size": bs,
                "grad_accum": ga,
            })
            for lr, wd, bs, ga in grid
        ]


class FoldSpec(BaseModel):
    """One k-shot training sample: k example ids per class, plus its seed."""
    index: int
    role: Literal["train", "dev"] = "train"
    train_ids: Dict[int, List[str]]
    test_split: str
    seed: int

    @property
    def all_ids(self) -> List[str]:
        return [i for label in sorted(self.train_ids) for i in self.train_ids[label]]

# === Artifacts ===

class LineageEntry(BaseModel):
    """One training stage that produced a checkpoint."""
    stage: str
    fingerprint: str
    parent: Optional[str] = None
    seed: Optional[int] = None
    detail: Dict[str, Any] = Field(default_factory=dict)


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int
    count: int


class ArtifactManifest(BaseModel):
    """manifest.json of a checkpoint or task delta."""
    format_version: int
    kind: Literal["checkpoint", "delta"]
    config: EncoderConfig
    tokenizer: str
    gelu: str
    fingerprint: str
    registry: Dict[str, Any] = Field(default_factory=dict)
    lineage: List[LineageEntry] = Field(default_factory=list)
    partition: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)
    tensors: List[TensorEntry] = Field(default_factory=list)

# === Reports ===

class MetricReport(BaseModel):
    """Per-fold scores with mean and sample standard deviation."""
    task: str
    metric: Metric
    scores: List[float]
    mean: float
    std: float
    formatted: str
    majority: Optional[float] = None


class FewShotReport(BaseModel):
    """Results file of one few-shot experiment."""
    task: str
    mode: TrainMode
    k: int
    symmetric: bool
    n_pseudotokens: int
    scores: List[float]
    mean: float
    std: float
    formatted: str
    majority: Optional[float] = None
    metric: Metric
    hyperparams: Hyperparams
    seeds: List[int]
    trainable_ratio: str
    lineage: List[LineageEntry] = Field(default_factory=list)


class GridEntry(BaseModel):
    hyperparams: Hyperparams
    fold_scores: List[float]
    mean_score: float


class GridReport(BaseModel):
    task: str
    mode: TrainMode
    best: Hyperparams
    entries: List[GridEntry]


class SweepEntry(BaseModel):
    n_pseudotokens: int
    report: MetricReport


class SweepReport(BaseModel):
    task: str
    mode: TrainMode
    k: int
    entries: List[SweepEntry]

# === Inference ===

class InferenceRequest(BaseModel):
    """One line of a batch inference request file."""
    id: str
    task: str
    s1: str
    s2: Optional[str] = None


class InferenceResult(BaseModel):
    """One line of a batch inference result file."""
    model_config = ConfigDict(populate_by_name=True)

    id: str
    task: str
    class_id: Optional[int] = Field(None, alias="class")
    probabilities: List[float] = Field(default_factory=list)
    logits: List[List[float]] = Field(default_factory=list)
    error: Optional[str] = None

# === CLI ===

class RunConfig(BaseModel):
    """Resolved command line, echoed next to every output."""
    command: str
    paths: Dict[str, Optional[str]] = Field(default_factory=dict)
    task: Optional[str] = None
    mode: Optional[TrainMode] = None
    k: Optional[int] = None
    folds: Optional[int] = None
    seed: int
    seeds: List[int] = Field(default_factory=list)
    hyperparams: Optional[Hyperparams] = None
    grid: bool = False
    options: Dict[str, Any] = Field(default_factory=dict)
