"""
Tokenization, special tokens, and the pseudotoken registry.

Token ids are laid out as: specials (0-4) < ordinary tokens (5..V-1) <
pseudotokens (V..V+capacity-1). Pseudotoken rows live in the same embedding
table as vocabulary rows; which rows may train is decided by the parameter
partition, not by the table layout.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import structlog

from compute import Tensor
from errors import InputError, StateError

logger = structlog.get_logger(__name__)

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)
FIRST_ORDINARY_ID = len(SPECIALS)

_TOKEN_PATTERN = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def split_words(text: str) -> List[str]:
    """Lowercase, split on whitespace, keep each punctuation mark as its own token"""
    return _TOKEN_PATTERN.findall(text.lower())


class Vocabulary:
    """Bijective token <-> id map with fixed special ids"""

    def __init__(self, tokens: Sequence[str] = ()):
        self._token_to_id: Dict[str, int] = {tok: i for i, tok in enumerate(SPECIALS)}
        self._id_to_token: List[str] = list(SPECIALS)
        self._frozen = False
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if self._frozen:
            raise StateError("vocabulary is frozen")
        if token in self._token_to_id:
            return self._token_to_id[token]
        self._token_to_id[token] = len(self._id_to_token)
        self._id_to_token.append(token)
        return self._token_to_id[token]

    def freeze(self) -> "Vocabulary":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    @property
    def ordinary_tokens(self) -> List[str]:
        return self._id_to_token[FIRST_ORDINARY_ID:]

    def save(self, path: Path) -> None:
        """One ordinary token per line; line number (0-based) = id - 5"""
        Path(path).write_text("".join(f"{tok}\n" for tok in self.ordinary_tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines).freeze()


def build_vocab(corpus: Sequence[str], max_size: int) -> Vocabulary:
    """Most frequent tokens first (ties lexicographic) up to ``max_size`` ids including specials"""
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    if max_size < FIRST_ORDINARY_ID:
        raise InputError(f"max_size={max_size} leaves no room for the {FIRST_ORDINARY_ID} special tokens")

    counts = Counter()
    for document in corpus:
        counts.update(tok for tok in split_words(document) if tok not in SPECIALS)

    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [tok for tok, _ in ranked[: max_size - FIRST_ORDINARY_ID]]
    vocab = Vocabulary(kept).freeze()
    logger.debug("vocab_built", size=len(vocab), dropped=max(0, len(ranked) - len(kept)))
    return vocab


def tokenize(v: Vocabulary, text: str) -> List[int]:
    """Map text to ids; out-of-vocabulary tokens become [UNK], no specials are added"""
    if not v.frozen:
        raise StateError("tokenize needs a frozen vocabulary")
    return [v.id(tok) for tok in split_words(text)]


def detokenize(v: Vocabulary, ids: Iterable[int]) -> str:
    return " ".join(v.token(i) for i in ids)


# ---------------------------------------------------------------------------
# Pseudotokens
# ---------------------------------------------------------------------------


@dataclass
class PseudotokenEntry:
    id: int
    init: str
    token: Optional[str] = None


@dataclass
class PseudotokenRegistry:
    """Trainable token ids allocated past the vocabulary, grouped per task"""

    vocab_size: int
    capacity: int
    next_id: int = -1
    tasks: Dict[str, List[PseudotokenEntry]] = field(default_factory=dict)

    def __post_init__(self):
        if self.next_id < 0:
            self.next_id = self.vocab_size

    def ids(self, task: Optional[str] = None) -> List[int]:
        if task is None:
            return sorted(e.id for entries in self.tasks.values() for e in entries)
        return [e.id for e in self.tasks.get(task, [])]

    @property
    def remaining(self) -> int:
        return self.vocab_size + self.capacity - self.next_id

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "capacity": self.capacity,
            "next_id": self.next_id,
            "tasks": {
                task: [{"id": e.id, "init": e.init, "token": e.token} for e in entries]
                for task, entries in self.tasks.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PseudotokenRegistry":
        return cls(
            vocab_size=int(data["vocab_size"]),
            capacity=int(data["capacity"]),
            next_id=int(data["next_id"]),
            tasks={
                task: [PseudotokenEntry(int(e["id"]), e["init"], e.get("token")) for e in entries]
                for task, entries in data.get("tasks", {}).items()
            },
        )


def register_pseudotokens(
    reg: PseudotokenRegistry,
    table: Tensor,
    n: int,
    init: str = "random",
    seed: int = 0,
    task: str = "default",
    vocab: Optional[Vocabulary] = None,
    copy_token: Optional[str] = None,
    std: float = 0.02,
) -> List[int]:
    """Allocate ``n`` fresh ids >= V and initialise their rows in ``table``.

    ``init="random"`` draws Normal(0, std^2) rows from ``seed``;
    ``init="copy"`` duplicates the current row of ``copy_token``.
    """
    if n < 0:
        raise InputError(f"cannot register {n} pseudotokens")
    if n == 0:
        reg.tasks.setdefault(task, [])
        return []
    if n > reg.remaining:
        raise InputError(f"pseudotoken capacity exhausted: need {n}, {reg.remaining} left")
    if table.shape[0] < reg.vocab_size + reg.capacity:
        raise InputError(f"embedding table has {table.shape[0]} rows, registry needs {reg.vocab_size + reg.capacity}")

    ids = list(range(reg.next_id, reg.next_id + n))
    if init == "copy":
        if vocab is None or copy_token is None or copy_token not in vocab:
            raise InputError(f"cannot copy out-of-vocabulary token {copy_token!r}")
        source = table.data[vocab.id(copy_token)]
        for i in ids:
            table.data[i] = source
    elif init == "random":
        rng = np.random.default_rng(seed)
        table.data[ids] = rng.normal(0.0, std, size=(n, table.shape[1])).astype(table.dtype)
    else:
        raise InputError(f"unknown pseudotoken init mode {init!r}")

    reg.next_id += n
    reg.tasks.setdefault(task, []).extend(
        PseudotokenEntry(i, init, copy_token if init == "copy" else None) for i in ids
    )
    logger.debug("pseudotokens_registered", task=task, ids=ids, init=init)
    return ids
