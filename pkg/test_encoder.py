"""
Encoder parameters, forward pass, partitions and checkpoints
"""

import json

import numpy as np
import pytest

from compute import Tensor
from encoder import (
    HEAD_BIAS,
    HEAD_WEIGHT,
    TOKEN_TABLE,
    backbone_fingerprint,
    encode,
    encode_batch,
    entail_logits,
    format_ratio,
    init_model,
    load_checkpoint,
    param_shapes,
    parameter_count,
    partition_parameters,
    save_checkpoint,
    trainable_ratio,
)
from entailment import bind_template
from errors import ConfigError, FormatError, InputError
from models import EncoderConfig, PartitionMode, Template
from storage import MANIFEST_FILE, WEIGHTS_FILE
from vocab import CLS_ID, PAD_ID, SEP_ID


@pytest.fixture
def sample_ids(vocab):
    return [CLS_ID, vocab.id("good"), vocab.id("movie"), SEP_ID, vocab.id("it"), vocab.id("was")]


class TestInit:
    def test_same_seed_is_bit_identical(self, tiny_config, vocab):
        a = init_model(tiny_config, 3, vocab)
        b = init_model(tiny_config, 3, vocab)
        assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)

    def test_different_seeds_differ(self, tiny_config, vocab):
        a = init_model(tiny_config, 3, vocab)
        b = init_model(tiny_config, 4, vocab)
        assert not np.array_equal(a.params[TOKEN_TABLE].data, b.params[TOKEN_TABLE].data)

    def test_default_parameter_count(self, vocab):
        cfg = EncoderConfig(vocab_size=len(vocab))
        model = init_model(cfg, 0, vocab)
        enumerated = sum(t.size for t in model.params.values())
        assert parameter_count(cfg) == enumerated == sum(model.units().values())
        assert enumerated == sum(int(np.prod(shape)) for _, shape in param_shapes(cfg))

    def test_heads_must_divide_width(self, vocab):
        with pytest.raises(ConfigError, match="divisible"):
            init_model(EncoderConfig(vocab_size=len(vocab), d_model=10, n_heads=4), 0, vocab)

    def test_vocab_size_must_match(self, vocab):
        with pytest.raises(ConfigError):
            init_model(EncoderConfig(vocab_size=len(vocab) + 1), 0, vocab)

    def test_init_rules(self, tiny_model):
        assert np.all(tiny_model.params["layers.0.ln1.gain"].data == 1.0)
        assert np.all(tiny_model.params["layers.0.attn.bq"].data == 0.0)
        assert np.all(tiny_model.params[HEAD_BIAS].data == 0.0)
        assert tiny_model.params["layers.0.ffn.w1"].data.std() > 0.0


class TestEncode:
    def test_overrides_with_actual_rows_are_identity(self, tiny_model, sample_ids):
        plain = encode(tiny_model, sample_ids).data
        rows = {pos: tiny_model.table.data[sample_ids[pos]].copy() for pos in (1, 4)}
        np.testing.assert_array_equal(encode(tiny_model, sample_ids, rows).data, plain)

    def test_overrides_change_output(self, tiny_model, sample_ids):
        plain = encode(tiny_model, sample_ids).data
        changed = encode(tiny_model, sample_ids, {4: np.ones(tiny_model.config.d_model)}).data
        assert not np.allclose(plain, changed)

    def test_identical_rows_in_a_batch(self, tiny_model, sample_ids):
        hidden = encode_batch(tiny_model, np.array([sample_ids, sample_ids])).data
        np.testing.assert_allclose(hidden[0], hidden[1], atol=1e-6)

    def test_padding_does_not_leak(self, tiny_model, sample_ids, vocab):
        model = tiny_model.astype(np.float64)
        longer = sample_ids + [vocab.id("great"), vocab.id("!"), SEP_ID]
        batch = np.full((2, len(longer)), PAD_ID)
        batch[0, : len(sample_ids)] = sample_ids
        batch[1] = longer
        together = encode_batch(model, batch).data[0, : len(sample_ids)]
        alone = encode(model, sample_ids).data
        np.testing.assert_allclose(together, alone, atol=1e-6)

    def test_too_long(self, tiny_model):
        with pytest.raises(InputError, match="max_seq"):
            encode(tiny_model, [CLS_ID] * (tiny_model.config.max_seq + 1))

    def test_shape(self, tiny_model, sample_ids):
        assert encode(tiny_model, sample_ids).shape == (len(sample_ids), tiny_model.config.d_model)


class TestEntailHead:
    def test_zero_cls_gives_biases(self, tiny_model):
        tiny_model.params[HEAD_BIAS].data[:] = [0.25, -0.5]
        hidden = Tensor(np.zeros((1, 3, tiny_model.config.d_model), dtype=np.float32))
        np.testing.assert_allclose(entail_logits(tiny_model, hidden).data, [[0.25, -0.5]])

    def test_zero_weights_give_biases(self, tiny_model, sample_ids):
        tiny_model.params[HEAD_WEIGHT].data[:] = 0.0
        tiny_model.params[HEAD_BIAS].data[:] = [1.0, 2.0]
        hidden = encode_batch(tiny_model, np.array([sample_ids]))
        np.testing.assert_allclose(entail_logits(tiny_model, hidden).data, [[1.0, 2.0]])

    def test_manual_product(self, tiny_model, sample_ids):
        rng = np.random.default_rng(0)
        tiny_model.params[HEAD_BIAS].data[:] = rng.normal(size=2)
        hidden = encode_batch(tiny_model, np.array([sample_ids]))
        cls = hidden.data[0, 0].astype(np.float64)
        w = tiny_model.params[HEAD_WEIGHT].data.astype(np.float64)
        b = tiny_model.params[HEAD_BIAS].data.astype(np.float64)
        expected = np.array([[sum(cls[i] * w[i, j] for i in range(len(cls))) + b[j] for j in range(2)]])
        np.testing.assert_allclose(entail_logits(tiny_model, hidden).data, expected, atol=1e-6)


class TestPartition:
    def test_full(self, tiny_model):
        partition = partition_parameters(tiny_model, PartitionMode.FULL)
        assert partition.trainable == frozenset(tiny_model.units())
        assert partition.frozen == frozenset()
        assert trainable_ratio(partition) == 1

    def test_head_only(self, tiny_model):
        partition = partition_parameters(tiny_model, "head_only")
        assert partition.trainable == {HEAD_WEIGHT, HEAD_BIAS}

    def test_unknown_mode(self, tiny_model):
        with pytest.raises(ConfigError):
            partition_parameters(tiny_model, "everything")

    def test_partition_is_disjoint_and_complete(self, tiny_model):
        bind_template(tiny_model, Template(negative_label_word=None), "sentiment", seed=1)
        for mode in PartitionMode:
            partition = partition_parameters(tiny_model, mode, "sentiment")
            assert not partition.trainable & partition.frozen
            assert partition.trainable | partition.frozen == set(tiny_model.units())

    def test_efficient_count_on_default_config(self, vocab):
        model = init_model(EncoderConfig(vocab_size=len(vocab)), 0, vocab)
        d = model.config.d_model
        # 5 pseudotokens plus trained copies of "it", "was", "great"
        bind_template(model, Template(n_pseudotokens=5, negative_label_word=None), "sentiment", seed=1)
        partition = partition_parameters(model, PartitionMode.EFFICIENT, "sentiment")
        assert partition.trainable_count == (5 + 3) * d + (d * 2 + 2)
        ratio = trainable_ratio(partition)
        assert ratio <= 0.05
        assert format_ratio(ratio) == f"{float(ratio):.6f}"

    def test_efficient_excludes_other_tasks(self, tiny_model):
        bind_template(tiny_model, Template(n_pseudotokens=2), "a", seed=1)
        bind_template(tiny_model, Template(n_pseudotokens=2), "b", seed=2)
        a = partition_parameters(tiny_model, PartitionMode.EFFICIENT, "a")
        b = partition_parameters(tiny_model, PartitionMode.EFFICIENT, "b")
        assert a.trainable & b.trainable == {HEAD_WEIGHT, HEAD_BIAS}


class TestFingerprint:
    def test_ignores_pseudotoken_rows_and_head(self, tiny_model):
        before = backbone_fingerprint(tiny_model)
        bind_template(tiny_model, Template(), "sentiment", seed=1)
        tiny_model.params[HEAD_WEIGHT].data[:] = 1.0
        assert backbone_fingerprint(tiny_model) == before

    def test_tracks_vocabulary_rows(self, tiny_model):
        before = backbone_fingerprint(tiny_model)
        tiny_model.table.data[7] += 1.0
        assert backbone_fingerprint(tiny_model) != before


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tiny_model, tmp_path):
        bind_template(tiny_model, Template(), "sentiment", seed=1)
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == tiny_model.config
        for name, tensor in tiny_model.params.items():
            assert np.array_equal(loaded.params[name].data, tensor.data), name
        assert loaded.registry.ids("sentiment") == tiny_model.registry.ids("sentiment")
        assert len(loaded.vocab) == len(tiny_model.vocab)

    def test_truncated_weights(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        weights = tmp_path / "ckpt" / WEIGHTS_FILE
        weights.write_bytes(weights.read_bytes()[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "ckpt")

    def test_manifest_width_disagrees_with_blob(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / MANIFEST_FILE
        manifest = json.loads(manifest_path.read_text())
        manifest["config"]["d_model"] = 32
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match=r"d_model=32 implies \d+ floats but weights.bin holds \d+"):
            load_checkpoint(tmp_path / "ckpt")

    def test_format_version_mismatch(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / MANIFEST_FILE
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="format version"):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "nowhere")
