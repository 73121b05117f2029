"""
Synthetic desk-scale task generators and JSONL dataset ingestion.

Every generator is balanced and deterministic per seed, and holds back the
last 25% of what it emits as a fixed test split that folds never draw from.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from errors import FormatError, InputError, LabelValidationError
from models import JsonlRecord, Metric, TaskKind, TaskSpec, Template
from entailment import template_preset

logger = structlog.get_logger(__name__)

TEST_FRACTION = 0.25


@dataclass(frozen=True)
class LabeledExample:
    s1: str
    label: int
    id: str
    s2: Optional[str] = None


@dataclass
class LabeledDataset:
    name: str
    num_classes: int
    train: List[LabeledExample] = field(default_factory=list)
    test: List[LabeledExample] = field(default_factory=list)

    @property
    def examples(self) -> List[LabeledExample]:
        return self.train + self.test

    def by_id(self) -> Dict[str, LabeledExample]:
        return {ex.id: ex for ex in self.examples}

    def label_counts(self, split: str = "train") -> Dict[int, int]:
        counts = {c: 0 for c in range(self.num_classes)}
        for ex in getattr(self, split):
            counts[ex.label] += 1
        return counts


# ---------------------------------------------------------------------------
# Lexicon
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SentimentLexicon:
    positive: Tuple[str, ...] = (
        "good", "great", "wonderful", "excellent", "fun", "brilliant",
        "lovely", "superb", "enjoyable", "delightful", "charming", "moving",
    )
    negative: Tuple[str, ...] = (
        "bad", "awful", "boring", "dull", "terrible", "poor",
        "horrible", "weak", "tedious", "bland", "clumsy", "lifeless",
    )
    nouns: Tuple[str, ...] = (
        "movie", "film", "story", "acting", "plot", "show",
        "book", "script", "cast", "music", "ending", "scene",
    )
    intensifiers: Tuple[str, ...] = ("really", "very", "truly", "quite", "so")
    frames: Tuple[str, ...] = (
        "the {noun} was {adj}",
        "a {intens} {adj} {noun}",
        "i found the {noun} {adj}",
        "the {noun} is {intens} {adj} .",
        "what a {adj} {noun} !",
        "overall the {noun} felt {adj}",
    )


ATTRIBUTES: Tuple[Tuple[str, str], ...] = (
    ("big", "small"), ("hot", "cold"), ("old", "new"), ("happy", "sad"),
    ("fast", "slow"), ("open", "closed"), ("full", "empty"), ("clean", "dirty"),
    ("loud", "quiet"), ("dark", "bright"),
)
NLI_SUBJECTS = ("dog", "house", "car", "room", "city", "train", "garden", "kitchen", "boat", "street")
NLI_PLACES = ("town", "park", "village", "morning", "evening", "winter", "summer", "north")

SYNONYMS: Dict[str, Tuple[Tuple[str, str], ...]] = {
    "adj": (("big", "large"), ("quick", "fast"), ("happy", "glad"), ("smart", "clever"), ("small", "little")),
    "noun": (("car", "automobile"), ("film", "movie"), ("kid", "child"), ("shop", "store"), ("doctor", "physician")),
    "verb": (("bought", "purchased"), ("liked", "enjoyed"), ("started", "began"), ("fixed", "repaired"), ("saw", "noticed")),
    "obj": (("road", "street"), ("present", "gift"), ("photo", "picture"), ("house", "home"), ("trip", "journey")),
}
PAIR_FRAME = "the {adj} {noun} {verb} the {obj}"

LABEL_PHRASES = (
    "it was great", "it was terrible", "it was good", "it was bad",
    "the review was positive", "the review was negative",
)


def lexicon(grammar: Optional[SentimentLexicon] = None) -> List[str]:
    """Every word the generators can emit, sorted"""
    grammar = grammar or SentimentLexicon()
    words = set(grammar.positive) | set(grammar.negative) | set(grammar.nouns) | set(grammar.intensifiers)
    for frame in grammar.frames:
        words.update(w for w in frame.split() if not w.startswith("{"))
    for a, b in ATTRIBUTES:
        words.update((a, b))
    words.update(NLI_SUBJECTS)
    words.update(NLI_PLACES)
    words.update("the in was it".split())
    for pairs in SYNONYMS.values():
        for a, b in pairs:
            words.update((a, b))
    for phrase in LABEL_PHRASES:
        words.update(phrase.split())
    return sorted(words)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _check_even(n: int) -> None:
    if n <= 0 or n % 2:
        raise InputError(f"generators need a positive even n, got {n}")


def _split(name: str, num_classes: int, examples: List[LabeledExample]) -> LabeledDataset:
    n_test = int(len(examples) * TEST_FRACTION)
    n_test -= n_test % num_classes
    cut = len(examples) - n_test
    dataset = LabeledDataset(name=name, num_classes=num_classes, train=examples[:cut], test=examples[cut:])
    logger.debug("dataset_generated", name=name, train=len(dataset.train), test=len(dataset.test))
    return dataset


def _balanced_labels(n: int, rng: np.random.Generator) -> List[int]:
    """n labels, one 0 and one 1 per consecutive pair in random order"""
    labels = []
    for _ in range(n // 2):
        labels.extend([0, 1] if rng.random() < 0.5 else [1, 0])
    return labels


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def gen_sentiment(n: int, seed: int, grammar: Optional[SentimentLexicon] = None) -> LabeledDataset:
    """Balanced binary reviews; the polarity adjective alone decides the label (1 = positive)"""
    _check_even(n)
    grammar = grammar or SentimentLexicon()
    rng = np.random.default_rng(seed)
    examples = []
    for i, label in enumerate(_balanced_labels(n, rng)):
        adjectives = grammar.positive if label == 1 else grammar.negative
        text = _pick(rng, grammar.frames).format(
            noun=_pick(rng, grammar.nouns),
            adj=_pick(rng, adjectives),
            intens=_pick(rng, grammar.intensifiers),
        )
        examples.append(LabeledExample(s1=text, label=label, id=f"sentiment-{seed}-{i}"))
    return _split("sentiment", 2, examples)


def gen_nli(n: int, seed: int) -> LabeledDataset:
    """Premise/hypothesis pairs: copied attribute entails (1), its antonym does not (0)"""
    _check_even(n)
    rng = np.random.default_rng(seed)
    examples = []
    for i, label in enumerate(_balanced_labels(n, rng)):
        subject = _pick(rng, NLI_SUBJECTS)
        pair = ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]
        flip = int(rng.integers(2))
        attribute, antonym = pair[flip], pair[1 - flip]
        premise = f"the {subject} in the {_pick(rng, NLI_PLACES)} was {attribute}"
        hypothesis = f"the {subject} was {attribute if label == 1 else antonym}"
        examples.append(LabeledExample(s1=premise, s2=hypothesis, label=label, id=f"nli-{seed}-{i}"))
    return _split("nli", 2, examples)


def gen_pairs(n: int, seed: int) -> LabeledDataset:
    """Paraphrase pairs: positives swap synonyms only, negatives also change one slot's meaning"""
    _check_even(n)
    rng = np.random.default_rng(seed)
    slots = list(SYNONYMS)
    examples = []
    for i, label in enumerate(_balanced_labels(n, rng)):
        chosen = {slot: SYNONYMS[slot][int(rng.integers(len(SYNONYMS[slot])))] for slot in slots}
        first = {slot: pair[int(rng.integers(2))] for slot, pair in chosen.items()}
        second = {}
        for slot, pair in chosen.items():
            synonym = pair[1] if first[slot] == pair[0] else pair[0]
            second[slot] = synonym if rng.random() < 0.5 else first[slot]
        if label == 0:
            slot = slots[int(rng.integers(len(slots)))]
            others = [p for p in SYNONYMS[slot] if p != chosen[slot]]
            second[slot] = _pick(rng, others[int(rng.integers(len(others)))])
        examples.append(LabeledExample(
            s1=PAIR_FRAME.format(**first),
            s2=PAIR_FRAME.format(**second),
            label=label,
            id=f"pairs-{seed}-{i}",
        ))
    return _split("pairs", 2, examples)


def gen_mlm_corpus(n: int, seed: int) -> List[str]:
    """Unlabelled sentences covering every generator plus the label phrases"""
    if n <= 0:
        raise InputError(f"corpus size must be positive, got {n}")
    per = max(2, (n // 4) + (n // 4) % 2)
    sentences = [ex.s1 for ex in gen_sentiment(per, seed).examples]
    sentences += [f"{ex.s1} . {ex.s2}" for ex in gen_nli(per, seed + 1).examples]
    sentences += [f"{ex.s1} . {ex.s2}" for ex in gen_pairs(per, seed + 2).examples]
    rng = np.random.default_rng(seed + 3)
    grammar = SentimentLexicon()
    while len(sentences) < n:
        label = int(rng.integers(2))
        adjectives = grammar.positive if label else grammar.negative
        review = f"the {_pick(rng, grammar.nouns)} was {_pick(rng, adjectives)}"
        sentences.append(f"{review} . {LABEL_PHRASES[int(rng.integers(len(LABEL_PHRASES)))]}")
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# Task specs
# ---------------------------------------------------------------------------


BUILTIN_TASKS: Dict[str, TaskSpec] = {
    "sentiment": TaskSpec(name="sentiment", kind=TaskKind.SINGLE, num_classes=2, metric=Metric.ACCURACY),
    "nli": TaskSpec(name="nli", kind=TaskKind.PAIR, num_classes=2, metric=Metric.ACCURACY),
    "pairs": TaskSpec(name="pairs", kind=TaskKind.PAIR, num_classes=2, metric=Metric.F1),
}

GENERATORS = {"sentiment": gen_sentiment, "nli": gen_nli, "pairs": gen_pairs}


def builtin_template(task: TaskSpec, n_pseudotokens: int = 5) -> Template:
    if task.kind == TaskKind.PAIR:
        return template_preset("pair", n_pseudotokens)
    return template_preset("differential_label_prompt", n_pseudotokens)


def load_task_spec(path: Path) -> TaskSpec:
    try:
        return TaskSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (ValidationError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} is not a valid task spec: {e}")


def load_template(path: Path) -> Template:
    try:
        return Template.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (ValidationError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} is not a valid template: {e}")


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def load_jsonl(path: Path, spec: TaskSpec, split: Optional[str] = None) -> List[LabeledExample]:
    """One {s1, s2?, label, id?} object per line; blank lines are skipped.

    Records without an id get ``<task>-<split>-<line>``; ``split`` defaults to the file stem.
    """
    path = Path(path)
    split = split or path.stem
    if not path.is_file():
        raise FormatError(f"{path} not found")
    examples: List[LabeledExample] = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = JsonlRecord.model_validate_json(line)
        except ValidationError as e:
            raise FormatError(f"{path}:{lineno}: malformed record: {e.errors()[0]['msg']}")
        if not 0 <= record.label < spec.num_classes:
            raise LabelValidationError(
                f"{path}:{lineno}: label {record.label} outside [0, {spec.num_classes}) for task {spec.name}"
            )
        if spec.kind == TaskKind.PAIR and record.s2 is None:
            raise FormatError(f"{path}:{lineno}: pair task {spec.name} needs s2")
        example_id = record.id or f"{spec.name}-{split}-{lineno}"
        if example_id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {example_id!r}")
        seen.add(example_id)
        examples.append(LabeledExample(s1=record.s1, s2=record.s2, label=record.label, id=example_id))
    logger.info("dataset_loaded", path=str(path), task=spec.name, examples=len(examples))
    return examples


def write_jsonl(path: Path, examples: Sequence[LabeledExample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = JsonlRecord(s1=ex.s1, s2=ex.s2, label=ex.label, id=ex.id)
            fh.write(record.model_dump_json(exclude_none=True) + "\n")
