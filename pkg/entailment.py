"""
Entailment reformulation: template binding and rendering, binary and
multi-class example construction, symmetric augmentation, and the
prediction rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from compute import Tensor
from encoder import Model, RowOverrides, encode_batch, entail_logits
from errors import ConfigError, InputError, StateError
from models import LabelDescription, Template, TemplateKind, TemplateLayout
from vocab import CLS_ID, PAD_ID, SEP_ID, Vocabulary, register_pseudotokens, split_words

if TYPE_CHECKING:
    from corpus import LabeledExample
    from trainer import TaskDelta

logger = structlog.get_logger(__name__)

DECISION_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def template_preset(name: str, n_pseudotokens: int = 5, **overrides) -> Template:
    """Named prompting schemes"""
    presets = {
        "entailment": dict(n_pseudotokens=0, train_prompt_words=False, train_label_word=False),
        "differential_prompt": dict(n_pseudotokens=n_pseudotokens, train_prompt_words=True, train_label_word=False),
        "differential_label_prompt": dict(n_pseudotokens=n_pseudotokens, train_prompt_words=True, train_label_word=True),
        "pair": dict(
            kind=TemplateKind.SENTENCE_PAIR,
            n_pseudotokens=n_pseudotokens,
            prompt_words=[],
            label_word=None,
            negative_label_word=None,
        ),
    }
    if name not in presets:
        raise ConfigError(f"unknown template preset {name!r}; choose one of {sorted(presets)}")
    return Template(**{**presets[name], **overrides})


def needed_descriptions(template: Template, num_classes: int, symmetric: bool = False) -> List[str]:
    """Label description texts a task renders under this template"""
    if template.kind == TemplateKind.SENTENCE_PAIR:
        return []
    if template.class_label_words:
        if len(template.class_label_words) < num_classes:
            raise ConfigError(
                f"template describes {len(template.class_label_words)} classes, task has {num_classes}"
            )
        return list(template.class_label_words[:num_classes])
    if num_classes != 2:
        raise ConfigError(f"a {num_classes}-class task needs class_label_words in its template")
    if not template.label_word:
        raise ConfigError("single-sentence templates need a label_word")
    texts = [template.label_word]
    if symmetric:
        if not template.negative_label_word:
            raise ConfigError("symmetric augmentation needs a negative_label_word")
        texts.append(template.negative_label_word)
    return texts


@dataclass(frozen=True)
class BoundTemplate:
    """A template resolved to concrete token ids for one task"""

    task: str
    template: Template
    layout: TemplateLayout
    vocab: Vocabulary
    vocab_size: int
    max_seq: int

    @property
    def multiclass(self) -> bool:
        return bool(self.template.class_label_words)

    @property
    def is_pair(self) -> bool:
        return self.template.kind == TemplateKind.SENTENCE_PAIR

    def description(self, polarity: int) -> LabelDescription:
        if polarity == 1:
            return LabelDescription(text=self.template.label_word, polarity=1)
        return LabelDescription(text=self.template.negative_label_word, polarity=0)


def bind_template(
    model: Model,
    template: Template,
    task: str,
    seed: int,
    num_classes: int = 2,
    symmetric: bool = False,
) -> BoundTemplate:
    """Register the task's pseudotokens and trained word copies on ``model``"""
    if model.vocab is None or model.registry is None:
        raise StateError("model carries no vocabulary; load it from a checkpoint or pass one to init_model")
    vocab = model.vocab
    table = model.table
    std = model.config.init_std

    pseudo_ids = register_pseudotokens(
        model.registry, table, template.n_pseudotokens,
        init=template.pseudotoken_init, seed=seed, task=task,
        vocab=vocab, copy_token=template.pseudotoken_copy_token, std=std,
    )

    copies: Dict[str, int] = {}

    def word_id(word: str, trained: bool) -> int:
        if not trained:
            if word not in vocab:
                raise InputError(f"template word {word!r} is not in the vocabulary")
            return vocab.id(word)
        if word not in copies:
            copies[word] = register_pseudotokens(
                model.registry, table, 1,
                init=template.copy_init, seed=seed + 1 + len(copies), task=task,
                vocab=vocab, copy_token=word, std=std,
            )[0]
        return copies[word]

    prompt_ids = [word_id(w, template.train_prompt_words) for w in template.prompt_words]
    label_ids = {
        text: [word_id(w, template.train_label_word) for w in split_words(text)]
        for text in needed_descriptions(template, num_classes, symmetric)
    }

    layout = TemplateLayout(pseudo_ids=pseudo_ids, prompt_ids=prompt_ids, label_ids=label_ids)
    logger.info("template_bound", task=task, pseudotokens=len(pseudo_ids), copies=len(copies))
    return BoundTemplate(task, template, layout, vocab, model.config.vocab_size, model.config.max_seq)


def rebind_template(template: Template, layout: TemplateLayout, task: str, model: Model) -> BoundTemplate:
    """BoundTemplate for an already registered layout (a stored delta)"""
    if model.vocab is None:
        raise StateError("model carries no vocabulary")
    return BoundTemplate(task, template, layout, model.vocab, model.config.vocab_size, model.config.max_seq)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntailmentExample:
    """One rendered entailment input with its target (1 = entail)"""

    ids: Tuple[int, ...]
    pseudo_positions: Tuple[int, ...]
    target: int
    source_id: Optional[str] = None
    class_id: Optional[int] = None
    description: Optional[str] = None


def render_template(
    bound: BoundTemplate,
    s1_ids: Sequence[int],
    s2_ids: Optional[Sequence[int]] = None,
    description: Optional[str] = None,
) -> EntailmentExample:
    """[CLS] s1 [SEP] T0..Tj prompt label (single) or [CLS] s1 [SEP] T0..Tj s2 (pair).

    Overlong inputs are cut from the right of s1 first, then of s2; the
    template tail is never truncated.
    """
    layout = bound.layout
    s1 = list(s1_ids)
    if bound.is_pair:
        tail: List[int] = []
        s2 = list(s2_ids or [])
    else:
        if description not in layout.label_ids:
            raise ConfigError(f"label description {description!r} is not bound for task {bound.task}")
        tail = list(layout.prompt_ids) + list(layout.label_ids[description])
        s2 = []

    fixed = 2 + len(layout.pseudo_ids) + len(tail)
    budget = bound.max_seq - fixed
    if budget < 0:
        raise InputError(f"template needs {fixed} positions but max_seq={bound.max_seq}")
    excess = len(s1) + len(s2) - budget
    if excess > 0:
        cut = min(excess, len(s1))
        s1 = s1[: len(s1) - cut]
        excess -= cut
        if excess > 0:
            s2 = s2[: len(s2) - excess]

    ids = [CLS_ID, *s1, SEP_ID, *layout.pseudo_ids, *s2, *tail]
    positions = tuple(i for i, token in enumerate(ids) if token >= bound.vocab_size)
    return EntailmentExample(ids=tuple(ids), pseudo_positions=positions, target=0, description=description)


def _tokens(bound: BoundTemplate, text: Optional[str]) -> List[int]:
    return [bound.vocab.id(tok) for tok in split_words(text)] if text else []


def reformulate_binary(example: "LabeledExample", bound: BoundTemplate, desc: Optional[LabelDescription]) -> EntailmentExample:
    """Target 1 iff the example's label is the class the description asserts"""
    if bound.is_pair:
        rendered = render_template(bound, _tokens(bound, example.s1), _tokens(bound, example.s2))
        return _with(rendered, target=int(example.label == 1), source_id=example.id, class_id=example.label)
    rendered = render_template(bound, _tokens(bound, example.s1), description=desc.text)
    return _with(
        rendered,
        target=int(example.label == desc.polarity),
        source_id=example.id,
        class_id=example.label,
    )


def reformulate_multiclass(example: "LabeledExample", bound: BoundTemplate, num_classes: int) -> List[EntailmentExample]:
    """One input per class; only the true class's input entails"""
    if num_classes < 2:
        raise ConfigError(f"multi-class reformulation needs at least 2 classes, got {num_classes}")
    words = bound.template.class_label_words
    if len(words) < num_classes:
        raise ConfigError(f"no label description for class {len(words)} of task {bound.task}")
    s1 = _tokens(bound, example.s1)
    out = []
    for c in range(num_classes):
        rendered = render_template(bound, s1, description=words[c])
        out.append(_with(rendered, target=int(example.label == c), source_id=example.id, class_id=c))
    return out


def _with(ex: EntailmentExample, **changes) -> EntailmentExample:
    return replace(ex, **changes)


@dataclass
class EntailmentDataset:
    """Rendered training inputs plus the labelled examples they came from"""

    examples: List[EntailmentExample]
    sources: List["LabeledExample"] = field(default_factory=list)
    num_classes: int = 2
    augmented: bool = False

    def __len__(self) -> int:
        return len(self.examples)


def build_dataset(examples: Sequence["LabeledExample"], bound: BoundTemplate, num_classes: int) -> EntailmentDataset:
    rendered: List[EntailmentExample] = []
    for ex in examples:
        if bound.multiclass:
            rendered.extend(reformulate_multiclass(ex, bound, num_classes))
        else:
            rendered.append(reformulate_binary(ex, bound, None if bound.is_pair else bound.description(1)))
    return EntailmentDataset(examples=rendered, sources=list(examples), num_classes=num_classes)


def symmetric_augment(
    dataset: EntailmentDataset,
    bound: BoundTemplate,
    p1: Optional[LabelDescription] = None,
    p_neg: Optional[LabelDescription] = None,
) -> EntailmentDataset:
    """Each source yields (x, p1, y) followed by (x, p-1, 1 - y)"""
    if dataset.augmented:
        raise ConfigError("dataset is already symmetrically augmented")
    if dataset.num_classes != 2 or bound.multiclass or bound.is_pair:
        raise ConfigError("symmetric augmentation applies to binary single-sentence tasks only")
    p1 = p1 or bound.description(1)
    p_neg = p_neg or bound.description(0)
    if p1.text == p_neg.text:
        raise ConfigError(f"label descriptions must differ, both are {p1.text!r}")

    out: List[EntailmentExample] = []
    for ex in dataset.sources:
        out.append(reformulate_binary(ex, bound, p1))
        out.append(reformulate_binary(ex, bound, p_neg))
    return EntailmentDataset(examples=out, sources=list(dataset.sources), num_classes=2, augmented=True)


def pad_examples(examples: Sequence[EntailmentExample]) -> np.ndarray:
    """B x L id array padded with [PAD] to the longest input"""
    length = max(len(ex.ids) for ex in examples)
    ids = np.full((len(examples), length), PAD_ID, dtype=np.int64)
    for row, ex in enumerate(examples):
        ids[row, : len(ex.ids)] = ex.ids
    return ids


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    class_id: int
    probabilities: List[float]
    logits: List[List[float]]


def entail_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the entail column for each row of n x 2 logits"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e[..., 1] / e.sum(axis=-1)


def decide_binary(p: float) -> int:
    """Class 1 only when the entail probability is strictly above the threshold"""
    return int(p > DECISION_THRESHOLD)


def argmax_lowest(scores: Sequence[float]) -> int:
    """Index of the highest score, lowest index on ties"""
    return int(np.argmax(np.asarray(scores)))


def reduce_prediction(logits: np.ndarray, multiclass: bool) -> Prediction:
    """Fold the logits of one request's rendered inputs into a class decision"""
    logits = np.asarray(logits)
    probs = entail_probability(logits)
    rows = [[float(v) for v in row] for row in logits]
    if multiclass:
        return Prediction(argmax_lowest(probs), [float(p) for p in probs], rows)
    p = float(probs[0])
    return Prediction(decide_binary(p), [1.0 - p, p], rows)


def entail_logits_for(
    model: Model,
    examples: Sequence[EntailmentExample],
    rows: Optional[Mapping[int, np.ndarray]] = None,
    head: Optional[Tuple[Tensor, Tensor]] = None,
    max_batch: int = 64,
) -> np.ndarray:
    """n x 2 entail logits; ``rows`` substitutes embeddings for pseudotoken ids"""
    out = np.zeros((len(examples), 2), dtype=np.float64)
    for start in range(0, len(examples), max_batch):
        chunk = examples[start:start + max_batch]
        ids = pad_examples(chunk)
        overrides = None
        if rows:
            mapping = {
                (b, pos): rows[ex.ids[pos]]
                for b, ex in enumerate(chunk)
                for pos in ex.pseudo_positions
                if ex.ids[pos] in rows
            }
            overrides = RowOverrides.from_mapping(mapping, model.dtype)
        hidden = encode_batch(model, ids, overrides)
        out[start:start + len(chunk)] = entail_logits(model, hidden, head).data
    return out


def query_examples(bound: BoundTemplate, example: "LabeledExample", num_classes: int) -> List[EntailmentExample]:
    """Rendered inputs needed to classify one example (label ignored)"""
    if bound.multiclass:
        return reformulate_multiclass(example, bound, num_classes)
    desc = None if bound.is_pair else bound.description(1)
    return [reformulate_binary(example, bound, desc)]


def predict_examples(
    model: Model,
    bound: BoundTemplate,
    examples: Sequence["LabeledExample"],
    num_classes: int,
    rows: Optional[Mapping[int, np.ndarray]] = None,
    head: Optional[Tuple[Tensor, Tensor]] = None,
    max_batch: int = 64,
) -> List[Prediction]:
    rendered: List[EntailmentExample] = []
    spans = []
    for ex in examples:
        group = query_examples(bound, ex, num_classes)
        spans.append((len(rendered), len(rendered) + len(group)))
        rendered.extend(group)
    if not rendered:
        return []
    logits = entail_logits_for(model, rendered, rows, head, max_batch)
    return [reduce_prediction(logits[a:b], bound.multiclass) for a, b in spans]


def predict(model: Model, delta: "TaskDelta", example: "LabeledExample") -> Prediction:
    """Classify one example with a task delta applied on top of ``model``"""
    bound = rebind_template(delta.template, delta.layout, delta.task.name, model)
    return predict_examples(model, bound, [example], delta.task.num_classes, delta.rows, delta.head)[0]
