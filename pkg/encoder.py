"""
Small pre-norm transformer encoder with an entailment head.

Parameters are addressed by name; the token embedding table is further split
into units (the vocabulary block and one unit per pseudotoken capacity row) so
a ParameterPartition can freeze the vocabulary while pseudotoken rows train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from compute import (
    Tensor,
    add,
    dropout,
    embedding_lookup,
    gelu,
    index,
    layer_norm,
    matmul,
    parse_unit,
    replace_rows,
    reshape,
    scale,
    softmax_rows,
    transpose,
    unit_view,
)
from config import settings
from errors import ConfigError, FormatError, InputError
from models import ArtifactManifest, EncoderConfig, LineageEntry, PartitionMode
from storage import VOCAB_FILE, array_bytes, read_artifact, read_manifest, sha256_hex, write_artifact
from vocab import PAD_ID, PseudotokenRegistry, Vocabulary

logger = structlog.get_logger(__name__)

TOKEN_TABLE = "embed.tokens"
POSITION_TABLE = "embed.positions"
HEAD_WEIGHT = "entail_head.weight"
HEAD_BIAS = "entail_head.bias"
MASKED_SCORE = -1e9

NOT_ENTAIL, ENTAIL = 0, 1


def param_shapes(cfg: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter tensor in canonical (initialisation and storage) order"""
    d, f = cfg.d_model, cfg.d_ff
    shapes = [
        (TOKEN_TABLE, (cfg.table_rows, d)),
        (POSITION_TABLE, (cfg.max_seq, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.gain", (d,)), (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
            (p + "ffn.w1", (d, f)), (p + "ffn.b1", (f,)),
            (p + "ffn.w2", (f, d)), (p + "ffn.b2", (d,)),
        ]
    shapes += [
        ("final_ln.gain", (d,)), ("final_ln.bias", (d,)),
        (HEAD_WEIGHT, (d, 2)), (HEAD_BIAS, (2,)),
        ("mlm_head.weight", (d, cfg.vocab_size)), ("mlm_head.bias", (cfg.vocab_size,)),
    ]
    return shapes


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count"""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_layer = 4 * d * d + 4 * d + 4 * d + 2 * d * f + f + d
    return cfg.table_rows * d + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d + (2 * d + 2) + (d * v + v)


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or leaf == "bias"


@dataclass
class Model:
    """Encoder parameters plus the vocabulary and pseudotoken registry they were built for"""

    config: EncoderConfig
    params: Dict[str, Tensor]
    vocab: Optional[Vocabulary] = None
    registry: Optional[PseudotokenRegistry] = None
    lineage: List[LineageEntry] = field(default_factory=list)

    @property
    def dtype(self):
        return self.params[TOKEN_TABLE].dtype

    @property
    def table(self) -> Tensor:
        return self.params[TOKEN_TABLE]

    def copy(self) -> "Model":
        return Model(
            config=self.config,
            params={n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.params.items()},
            vocab=self.vocab,
            registry=PseudotokenRegistry.from_dict(self.registry.to_dict()) if self.registry else None,
            lineage=list(self.lineage),
        )

    def astype(self, dtype) -> "Model":
        clone = self.copy()
        clone.params = {n: t.astype(dtype) for n, t in clone.params.items()}
        return clone

    def units(self) -> Dict[str, int]:
        """Partition units in canonical order with their element counts"""
        cfg = self.config
        out: Dict[str, int] = {}
        for name, shape in param_shapes(cfg):
            if name == TOKEN_TABLE:
                out[f"{TOKEN_TABLE}[0:{cfg.vocab_size}]"] = cfg.vocab_size * cfg.d_model
                for row in range(cfg.vocab_size, cfg.table_rows):
                    out[f"{TOKEN_TABLE}[{row}]"] = cfg.d_model
            else:
                out[name] = int(np.prod(shape))
        return out

    def unit_data(self, unit: str) -> np.ndarray:
        name, selector = parse_unit(unit)
        return unit_view(self.params[name].data, selector)

    def assign_unit(self, unit: str, data: np.ndarray) -> None:
        name, selector = parse_unit(unit)
        target = self.params[name].data
        if selector is None:
            target[...] = data
        else:
            target[selector] = data


def init_model(
    cfg: EncoderConfig,
    seed: int,
    vocab: Optional[Vocabulary] = None,
    dtype=np.float32,
) -> Model:
    """Normal(0, init_std^2) weights, zero biases, unit layer-norm gains"""
    issues = cfg.issues()
    if issues:
        raise ConfigError("; ".join(issues))
    if vocab is not None and len(vocab) != cfg.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but config says vocab_size={cfg.vocab_size}")

    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif _is_bias(name):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)

    registry = PseudotokenRegistry(vocab_size=cfg.vocab_size, capacity=cfg.pseudotoken_capacity)
    logger.debug("model_initialised", seed=seed, parameters=parameter_count(cfg))
    return Model(config=cfg, params=params, vocab=vocab, registry=registry)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class RowOverrides:
    """Input-embedding rows substituted at (batch row, position) before layer 0"""

    batch_index: np.ndarray
    positions: np.ndarray
    rows: Tensor

    @classmethod
    def from_mapping(cls, mapping: Mapping[Tuple[int, int], Union[np.ndarray, Tensor]], dtype) -> Optional["RowOverrides"]:
        if not mapping:
            return None
        keys = sorted(mapping)
        rows = [mapping[k].data if isinstance(mapping[k], Tensor) else np.asarray(mapping[k]) for k in keys]
        return cls(
            batch_index=np.array([k[0] for k in keys], dtype=np.int64),
            positions=np.array([k[1] for k in keys], dtype=np.int64),
            rows=Tensor(np.stack(rows).astype(dtype), dtype=dtype),
        )


def _attention_block(model: Model, x: Tensor, prefix: str, mask: Tensor, trace: Optional[list]) -> Tensor:
    cfg = model.config
    p = model.params
    batch, length, d = x.shape
    heads = cfg.n_heads
    dh = d // heads

    h = layer_norm(x, p[prefix + "ln1.gain"], p[prefix + "ln1.bias"], cfg.layer_norm_eps)

    def project(w: str, b: str) -> Tensor:
        y = add(matmul(h, p[prefix + w]), p[prefix + b])
        return transpose(reshape(y, (batch, length, heads, dh)), (0, 2, 1, 3))

    q = project("attn.wq", "attn.bq")
    k = project("attn.wk", "attn.bk")
    v = project("attn.wv", "attn.bv")

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = softmax_rows(add(scores, mask))
    if trace is not None:
        trace.append(probs.data)

    context = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (batch, length, d))
    out = add(matmul(context, p[prefix + "attn.wo"]), p[prefix + "attn.bo"])
    return add(x, out)


def _ffn_block(model: Model, x: Tensor, prefix: str, rng: Optional[np.random.Generator]) -> Tensor:
    cfg = model.config
    p = model.params
    h = layer_norm(x, p[prefix + "ln2.gain"], p[prefix + "ln2.bias"], cfg.layer_norm_eps)
    h = gelu(add(matmul(h, p[prefix + "ffn.w1"]), p[prefix + "ffn.b1"]), cfg.gelu)
    h = add(matmul(h, p[prefix + "ffn.w2"]), p[prefix + "ffn.b2"])
    if rng is not None:
        h = dropout(h, cfg.dropout, rng)
    return add(x, h)


def encode_batch(
    model: Model,
    ids: np.ndarray,
    overrides: Optional[RowOverrides] = None,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
) -> Tensor:
    """Hidden states B x L x d for a padded batch of id sequences.

    [PAD] positions are excluded from attention as keys. ``rng`` enables
    dropout (training only); ``trace`` collects per-layer attention
    probabilities.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise InputError(f"encode_batch expects a B x L id array, got shape {ids.shape}")
    batch, length = ids.shape
    if length > cfg.max_seq:
        raise InputError(f"sequence length {length} exceeds max_seq={cfg.max_seq}")

    x = embedding_lookup(model.params[TOKEN_TABLE], ids)
    if overrides is not None:
        if overrides.positions.size and int(overrides.positions.max()) >= length:
            raise InputError(f"override position {int(overrides.positions.max())} outside length {length}")
        x = replace_rows(x, (overrides.batch_index, overrides.positions), overrides.rows)
    x = add(x, index(model.params[POSITION_TABLE], slice(0, length)))
    if rng is not None:
        x = dropout(x, cfg.dropout, rng)

    mask_values = np.where(ids == PAD_ID, MASKED_SCORE, 0.0).astype(model.dtype)
    mask = Tensor(mask_values.reshape(batch, 1, 1, length), dtype=model.dtype)

    for i in range(cfg.n_layers):
        prefix = f"layers.{i}."
        x = _attention_block(model, x, prefix, mask, trace)
        x = _ffn_block(model, x, prefix, rng)

    return layer_norm(x, model.params["final_ln.gain"], model.params["final_ln.bias"], cfg.layer_norm_eps)


def encode(
    model: Model,
    ids: Sequence[int],
    row_overrides: Optional[Mapping[int, Union[np.ndarray, Tensor]]] = None,
) -> Tensor:
    """Hidden states L x d for one sequence, optional rows substituted per position"""
    ids = list(ids)
    if len(ids) > model.config.max_seq:
        raise InputError(f"sequence length {len(ids)} exceeds max_seq={model.config.max_seq}")
    overrides = None
    if row_overrides:
        bad = [pos for pos in row_overrides if not 0 <= pos < len(ids)]
        if bad:
            raise InputError(f"override position {bad[0]} outside length {len(ids)}")
        overrides = RowOverrides.from_mapping({(0, pos): row for pos, row in row_overrides.items()}, model.dtype)
    hidden = encode_batch(model, np.asarray([ids], dtype=np.int64), overrides)
    return index(hidden, 0)


def entail_logits(model: Model, hidden: Tensor, head: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
    """Affine map of the position-0 ([CLS]) vector: column 0 not-entail, 1 entail"""
    weight, bias = head if head is not None else (model.params[HEAD_WEIGHT], model.params[HEAD_BIAS])
    cls = index(hidden, (slice(None), 0)) if hidden.ndim == 3 else index(hidden, slice(0, 1))
    return add(matmul(cls, weight), bias)


def mlm_logits(model: Model, hidden: Tensor, batch_index: np.ndarray, positions: np.ndarray) -> Tensor:
    """Vocabulary logits at the given (row, position) pairs"""
    picked = index(hidden, (np.asarray(batch_index), np.asarray(positions)))
    return add(matmul(picked, model.params["mlm_head.weight"]), model.params["mlm_head.bias"])


# ---------------------------------------------------------------------------
# Parameter partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint split of every parameter unit into frozen and trainable"""

    mode: PartitionMode
    trainable: frozenset
    frozen: frozenset
    sizes: Mapping[str, int]

    @property
    def trainable_count(self) -> int:
        return sum(self.sizes[u] for u in self.trainable)

    @property
    def total_count(self) -> int:
        return sum(self.sizes.values())

    def describe(self) -> dict:
        return {
            "mode": self.mode.value,
            "trainable": sorted(self.trainable),
            "trainable_count": self.trainable_count,
            "total_count": self.total_count,
        }


def pseudotoken_unit(row: int) -> str:
    return f"{TOKEN_TABLE}[{row}]"


def partition_parameters(
    model: Model,
    mode: Union[PartitionMode, str],
    task: Optional[str] = None,
) -> ParameterPartition:
    """Split parameters per mode; efficient mode trains the task's pseudotoken rows and the entail head"""
    try:
        mode = PartitionMode(mode)
    except ValueError:
        raise ConfigError(f"unknown partition mode {mode!r}")

    sizes = model.units()
    head = {HEAD_WEIGHT, HEAD_BIAS}
    if mode == PartitionMode.FULL:
        trainable = set(sizes)
    elif mode == PartitionMode.HEAD_ONLY:
        trainable = head
    else:
        rows = model.registry.ids(task) if model.registry else []
        trainable = head | {pseudotoken_unit(r) for r in rows}

    return ParameterPartition(
        mode=mode,
        trainable=frozenset(trainable),
        frozen=frozenset(set(sizes) - trainable),
        sizes=dict(sizes),
    )


def trainable_ratio(partition: ParameterPartition) -> Fraction:
    """|trainable| / |all| as an exact rational"""
    return Fraction(partition.trainable_count, partition.total_count)


def format_ratio(ratio: Fraction) -> str:
    return f"{float(ratio):.6f}"


# ---------------------------------------------------------------------------
# Fingerprints and checkpoints
# ---------------------------------------------------------------------------


def hash_units(model: Model, units) -> str:
    """SHA-256 over the bytes of the given units in sorted order"""
    def chunks():
        for unit in sorted(units):
            yield unit.encode("utf-8")
            yield array_bytes(model.unit_data(unit))
    return sha256_hex(chunks())


def backbone_units(model: Model) -> List[str]:
    """Units shared by every task: everything except pseudotoken rows and the entail head"""
    return [
        u for u in model.units()
        if u not in (HEAD_WEIGHT, HEAD_BIAS) and not (u.startswith(TOKEN_TABLE + "[") and ":" not in u)
    ]


def backbone_fingerprint(model: Model) -> str:
    config_bytes = model.config.model_dump_json().encode("utf-8")
    units = backbone_units(model)

    def chunks():
        yield config_bytes
        for unit in units:
            yield unit.encode("utf-8")
            yield array_bytes(model.unit_data(unit))
    return sha256_hex(chunks())


def save_checkpoint(
    model: Model,
    path: Path,
    partition: Optional[ParameterPartition] = None,
    metadata: Optional[dict] = None,
) -> ArtifactManifest:
    """Persist parameters, vocabulary, registry and lineage as a checkpoint directory"""
    manifest = ArtifactManifest(
        format_version=settings.CHECKPOINT_FORMAT_VERSION,
        kind="checkpoint",
        config=model.config,
        tokenizer=settings.TOKENIZER,
        gelu=model.config.gelu,
        fingerprint=backbone_fingerprint(model),
        registry=model.registry.to_dict() if model.registry else {},
        lineage=model.lineage,
        partition=partition.describe() if partition else None,
        metadata=metadata or {},
    )
    tensors = [(name, model.params[name].data) for name, _ in param_shapes(model.config)]
    extra = {}
    if model.vocab is not None:
        extra[VOCAB_FILE] = "".join(f"{tok}\n" for tok in model.vocab.ordinary_tokens)
    return write_artifact(Path(path), manifest, tensors, extra)


def load_checkpoint(path: Path) -> Model:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.kind != "checkpoint":
        raise FormatError(f"{path} holds a {manifest.kind}, not a checkpoint")
    if manifest.tokenizer != settings.TOKENIZER:
        raise FormatError(f"{path} was built with tokenizer {manifest.tokenizer!r}, expected {settings.TOKENIZER!r}")
    cfg = manifest.config
    if manifest.gelu != cfg.gelu:
        raise FormatError(f"{path} records gelu={manifest.gelu!r} but config says {cfg.gelu!r}")

    _, arrays = read_artifact(path, expected_floats=parameter_count(cfg))
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        array = arrays.get(name)
        if array is None:
            raise FormatError(f"{path} is missing tensor {name}")
        if tuple(array.shape) != shape:
            raise FormatError(f"tensor {name} has shape {tuple(array.shape)}, config d_model={cfg.d_model} needs {shape}")
        params[name] = Tensor(array.copy(), requires_grad=True, name=name)

    vocab = None
    vocab_path = path / VOCAB_FILE
    if vocab_path.is_file():
        vocab = Vocabulary.load(vocab_path)
        if len(vocab) != cfg.vocab_size:
            raise FormatError(f"{vocab_path} holds {len(vocab)} tokens, config says vocab_size={cfg.vocab_size}")

    registry = (
        PseudotokenRegistry.from_dict(manifest.registry)
        if manifest.registry
        else PseudotokenRegistry(cfg.vocab_size, cfg.pseudotoken_capacity)
    )
    model = Model(config=cfg, params=params, vocab=vocab, registry=registry, lineage=list(manifest.lineage))
    fingerprint = backbone_fingerprint(model)
    if fingerprint != manifest.fingerprint:
        raise FormatError(f"{path} fingerprint mismatch: manifest {manifest.fingerprint[:12]}, weights {fingerprint[:12]}")
    logger.info("checkpoint_loaded", path=str(path), fingerprint=fingerprint[:12], lineage=len(model.lineage))
    return model
