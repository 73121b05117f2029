"""
Folds, masking, training stages, scoring and the protocol harnesses
"""

import dataclasses

import numpy as np
import pytest

import trainer
from corpus import LabeledDataset, LabeledExample, builtin_template, gen_nli, gen_sentiment
from encoder import backbone_fingerprint, hash_units
from errors import ConfigError, InputError, StateError
from models import HyperparamSpace, Hyperparams, Metric, PartitionMode, TaskSpec, TrainMode
from trainer import (
    evaluate,
    grid_search,
    intermediate_train,
    majority_score,
    mask_count,
    mask_sequences,
    metric_score,
    prepare_mlm_sequences,
    pretrain_mlm,
    pseudotoken_sweep,
    run_fewshot,
    sample_folds,
    summarize_scores,
    train_fewshot,
    train_folds,
    verify_lineage,
)
from vocab import FIRST_ORDINARY_ID, MASK_ID

SENTIMENT = TaskSpec(name="sentiment", num_classes=2, metric=Metric.ACCURACY)
QUICK = Hyperparams(learning_rate=1e-3, batch_size=8, epochs=2, patience=2, seed=7)


def balanced(n_train: int, n_test: int = 20) -> LabeledDataset:
    train = [LabeledExample(s1=f"s{i}", label=i % 2, id=f"train-{i}") for i in range(n_train)]
    test = [LabeledExample(s1=f"t{i}", label=i % 2, id=f"test-{i}") for i in range(n_test)]
    return LabeledDataset(name="toy", num_classes=2, train=train, test=test)


class TestFolds:
    def test_k16_five_folds(self):
        folds = sample_folds(balanced(200), k=16, n_folds=5, seed=7)
        assert len(folds) == 5
        assert all(len(f.all_ids) == 32 for f in folds)
        assert len({i for f in folds for i in f.all_ids}) == 160
        assert [f.seed for f in folds] == [7, 8, 9, 10, 11]

    @pytest.mark.parametrize("k", [1, 8, 16])
    def test_stratified_and_disjoint(self, k):
        dataset = balanced(200)
        folds = sample_folds(dataset, k=k, n_folds=5, seed=3)
        labels = {ex.id: ex.label for ex in dataset.train}
        seen = set()
        for fold in folds:
            assert {c: len(ids) for c, ids in fold.train_ids.items()} == {0: k, 1: k}
            assert all(labels[i] == c for c, ids in fold.train_ids.items() for i in ids)
            assert not seen & set(fold.all_ids)
            seen |= set(fold.all_ids)
        assert not seen & {ex.id for ex in dataset.test}

    def test_deterministic(self):
        assert sample_folds(balanced(200), 4, seed=1) == sample_folds(balanced(200), 4, seed=1)

    def test_insufficient_examples(self):
        with pytest.raises(InputError, match=r"needs 80 .* only 10 available"):
            sample_folds(balanced(20), k=16)

    def test_dev_fold(self):
        folds = sample_folds(balanced(200), k=4, n_folds=5, seed=7, dev_fold=True)
        assert [f.role for f in folds] == ["train"] * 5 + ["dev"]
        assert not set(folds[-1].all_ids) & {i for f in folds[:-1] for i in f.all_ids}


class TestMasking:
    @pytest.mark.parametrize("length,expected", [(2, 1), (6, 1), (7, 1), (20, 3), (40, 6)])
    def test_mask_count(self, length, expected):
        assert mask_count(length) == expected

    def test_exact_count_per_sequence(self, vocab, mlm_corpus):
        sequences = prepare_mlm_sequences(vocab, mlm_corpus[:16], 32)
        batch = mask_sequences(sequences, np.random.default_rng(0), len(vocab))
        per_row = np.bincount(batch.batch_index, minlength=len(sequences))
        for row, seq in enumerate(sequences):
            ordinary = sum(1 for t in seq if t >= FIRST_ORDINARY_ID)
            assert per_row[row] == min(mask_count(len(seq)), ordinary)
        for row, pos, target in zip(batch.batch_index, batch.positions, batch.targets):
            assert sequences[row][pos] == target >= FIRST_ORDINARY_ID

    def test_mask_only(self, vocab, mlm_corpus):
        sequences = prepare_mlm_sequences(vocab, mlm_corpus[:16], 32)
        batch = mask_sequences(sequences, np.random.default_rng(0), len(vocab), "mask_only")
        assert np.all(batch.ids[batch.batch_index, batch.positions] == MASK_ID)

    def test_unknown_strategy(self, vocab, mlm_corpus):
        sequences = prepare_mlm_sequences(vocab, mlm_corpus[:4], 32)
        with pytest.raises(ConfigError):
            mask_sequences(sequences, np.random.default_rng(0), len(vocab), "span")


class TestPretraining:
    def test_deterministic(self, tiny_model, mlm_corpus):
        a = pretrain_mlm(tiny_model, mlm_corpus, 3, QUICK)
        b = pretrain_mlm(tiny_model, mlm_corpus, 3, QUICK)
        assert a.final_loss == b.final_loss
        assert a.losses == b.losses

    def test_original_untouched_and_lineage_recorded(self, tiny_model, mlm_corpus):
        before = backbone_fingerprint(tiny_model)
        result = pretrain_mlm(tiny_model, mlm_corpus, 2, QUICK)
        assert backbone_fingerprint(tiny_model) == before
        assert [e.stage for e in result.model.lineage] == ["pretrain"]
        assert verify_lineage(result.model)

    def test_corpus_too_small(self, tiny_model, mlm_corpus):
        with pytest.raises(InputError):
            pretrain_mlm(tiny_model, mlm_corpus[:3], 2, QUICK)

    def test_corpus_too_small_for_steps(self, tiny_model, mlm_corpus):
        with pytest.raises(InputError, match="too small for 100 steps"):
            pretrain_mlm(tiny_model, mlm_corpus[:20], 100, QUICK)

    def test_zero_steps(self, tiny_model, mlm_corpus):
        with pytest.raises(InputError, match="steps must be positive"):
            pretrain_mlm(tiny_model, mlm_corpus, 0, QUICK)

    def test_intermediate_extends_lineage(self, tiny_model, mlm_corpus):
        base = pretrain_mlm(tiny_model, mlm_corpus, 2, QUICK).model
        nli = gen_nli(24, seed=1)
        result = intermediate_train(base, nli.train, QUICK.model_copy(update={"epochs": 1}), nli.test)
        stages = result.model.lineage
        assert [e.stage for e in stages] == ["pretrain", "intermediate"]
        assert stages[1].parent == backbone_fingerprint(base)
        assert verify_lineage(result.model)
        assert 0.0 <= result.accuracy <= 100.0

    def test_tampered_lineage(self, tiny_model, mlm_corpus):
        model = pretrain_mlm(tiny_model, mlm_corpus, 2, QUICK).model
        model.table.data[6] += 1.0
        assert not verify_lineage(model)


class TestFewShot:
    def fold(self, sentiment, k=2, **kwargs):
        return sample_folds(sentiment, k=k, n_folds=1, seed=7, **kwargs)[0]

    def test_efficient_mode_freezes_backbone(self, tiny_model, sentiment):
        template = builtin_template(SENTIMENT, 3)
        result = train_fewshot(tiny_model, SENTIMENT, self.fold(sentiment), sentiment.by_id(), template, "de-pe", QUICK)
        assert result.partition.mode == PartitionMode.EFFICIENT
        assert hash_units(result.model, result.partition.frozen) == result.frozen_hash
        assert backbone_fingerprint(result.model) == backbone_fingerprint(tiny_model)
        assert result.delta.fingerprint == backbone_fingerprint(tiny_model)
        # 3 pseudotokens plus copies of "it", "was", "great"
        assert sorted(result.delta.rows) == result.model.registry.ids("sentiment")
        assert len(result.delta.rows) == 6
        assert tiny_model.registry.ids("sentiment") == []
        assert result.examples_per_epoch == 4

    def test_backbone_frozen_after_every_fold(self, tiny_model):
        dataset = gen_sentiment(240, seed=7)
        template = builtin_template(SENTIMENT, 3)
        before = backbone_fingerprint(tiny_model)
        folds = sample_folds(dataset, k=16, n_folds=5, seed=7)
        results = train_folds(tiny_model, SENTIMENT, folds, dataset.by_id(), template, "de-pe", QUICK)
        assert len(results) == 5
        for result in results:
            assert result.examples_per_epoch == 32
            assert hash_units(result.model, result.partition.frozen) == result.frozen_hash
            assert backbone_fingerprint(result.model) == before
            assert result.delta.fingerprint == before
        assert backbone_fingerprint(tiny_model) == before

    def test_symmetric_doubles_examples(self, tiny_model, sentiment):
        template = builtin_template(SENTIMENT, 2)
        result = train_fewshot(
            tiny_model, SENTIMENT, self.fold(sentiment, k=4), sentiment.by_id(), template, "de-pe", QUICK, symmetric=True
        )
        assert result.examples_per_epoch == 2 * 4 * 2

    def test_full_mode_changes_backbone(self, tiny_model, sentiment):
        template = builtin_template(SENTIMENT, 2)
        result = train_fewshot(tiny_model, SENTIMENT, self.fold(sentiment), sentiment.by_id(), template, TrainMode.DE, QUICK)
        assert result.delta.fingerprint == backbone_fingerprint(result.model)
        assert result.delta.fingerprint != backbone_fingerprint(tiny_model)
        assert result.ratio == 1

    def test_head_mode_trains_only_head(self, tiny_model, sentiment):
        template = builtin_template(SENTIMENT, 2)
        result = train_fewshot(tiny_model, SENTIMENT, self.fold(sentiment), sentiment.by_id(), template, "head", QUICK)
        assert result.partition.trainable_count == tiny_model.config.d_model * 2 + 2
        assert hash_units(result.model, result.partition.frozen) == result.frozen_hash

    def test_unknown_mode(self, tiny_model, sentiment):
        with pytest.raises(ConfigError):
            train_fewshot(tiny_model, SENTIMENT, self.fold(sentiment), sentiment.by_id(), builtin_template(SENTIMENT), "lora", QUICK)

    def test_unknown_fold_ids(self, tiny_model, sentiment):
        fold = self.fold(sentiment)
        with pytest.raises(InputError):
            train_fewshot(tiny_model, SENTIMENT, fold, {}, builtin_template(SENTIMENT), "de-pe", QUICK)


class TestScoring:
    def test_all_correct(self):
        scores = [metric_score(Metric.ACCURACY, [0, 1, 1], [0, 1, 1]) for _ in range(5)]
        assert summarize_scores(scores)[2] == "100.0 (0.0)"

    def test_sample_std(self):
        mean, std, text = summarize_scores([80.0, 90.0])
        assert mean == 85.0
        assert std == pytest.approx(np.sqrt(50.0))
        assert text == "85.0 (7.1)"

    def test_majority_on_balanced(self):
        assert majority_score(Metric.ACCURACY, [0, 1] * 10, 2) == 50.0

    def test_all_negative_f1(self):
        assert metric_score(Metric.F1, [0] * 6, [0, 1] * 3) == 0.0

    def test_f1(self):
        # tp=2, fp=1, fn=1
        assert metric_score(Metric.F1, [1, 1, 1, 0, 0], [1, 1, 0, 1, 0]) == pytest.approx(100.0 * 4 / 6)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            metric_score(Metric.ACCURACY, [1], [1, 0])


class TestEvaluate:
    def test_report(self, tiny_model, sentiment):
        template = builtin_template(SENTIMENT, 2)
        folds = sample_folds(sentiment, k=2, n_folds=2, seed=7)
        deltas = [
            train_fewshot(tiny_model, SENTIMENT, f, sentiment.by_id(), template, "de-pe", QUICK).delta for f in folds
        ]
        report = evaluate(tiny_model, deltas, SENTIMENT, sentiment.test)
        assert len(report.scores) == 2
        assert report.majority == 50.0
        assert report.formatted == f"{report.mean:.1f} ({report.std:.1f})"

    def test_fingerprint_mismatch(self, tiny_model, sentiment):
        fold = sample_folds(sentiment, k=1, n_folds=1, seed=7)[0]
        delta = train_fewshot(tiny_model, SENTIMENT, fold, sentiment.by_id(), builtin_template(SENTIMENT, 1), "de-pe", QUICK).delta
        with pytest.raises(StateError):
            evaluate(tiny_model, [dataclasses.replace(delta, fingerprint="0" * 64)], SENTIMENT, sentiment.test)

    def test_metric_task_mismatch(self, tiny_model, sentiment):
        task = TaskSpec(name="sentiment", num_classes=3, metric=Metric.F1)
        with pytest.raises(ConfigError):
            evaluate(tiny_model, [], task, sentiment.test)


class TestHarnesses:
    def test_full_grid_has_36_points(self):
        points = HyperparamSpace().points(Hyperparams())
        assert len(points) == 36
        assert len(set(points)) == 36
        assert points[0].learning_rate == 1e-5 and points[0].batch_size == 8

    def test_singleton_space_skips_training(self, tiny_model, sentiment, monkeypatch):
        def fail(*args, **kwargs):
            raise AssertionError("trained a singleton space")

        monkeypatch.setattr(trainer, "train_fewshot", fail)
        space = HyperparamSpace(learning_rates=[1e-4], weight_decays=[0.0], batch_sizes=[8], grad_accums=[1])
        report = grid_search(space, tiny_model, SENTIMENT, sentiment, builtin_template(SENTIMENT), "de-pe", k=2)
        assert report.best.learning_rate == 1e-4
        assert report.entries == []

    def test_grid_winner_is_deterministic(self, tiny_model, sentiment):
        space = HyperparamSpace(learning_rates=[1e-4, 1e-3], weight_decays=[0.0], batch_sizes=[8], grad_accums=[1])
        template = builtin_template(SENTIMENT, 1)
        runs = [
            grid_search(space, tiny_model, SENTIMENT, sentiment, template, "de-pe", k=1, n_folds=1, base=QUICK)
            for _ in range(2)
        ]
        assert runs[0].best == runs[1].best
        assert [e.fold_scores for e in runs[0].entries] == [e.fold_scores for e in runs[1].entries]
        assert len(runs[0].entries) == 2

    def test_run_fewshot(self, tiny_model, sentiment):
        run = run_fewshot(tiny_model, SENTIMENT, sentiment, builtin_template(SENTIMENT, 2), "de-pe", QUICK, k=2, n_folds=2)
        assert len(run.results) == 2
        assert run.report.seeds == [7, 8]
        assert float(run.report.trainable_ratio) <= 0.05
        assert run.report.mode == TrainMode.DE_PE

    def test_sweep(self, tiny_model, sentiment):
        report = pseudotoken_sweep(
            tiny_model, SENTIMENT, sentiment, builtin_template(SENTIMENT), "de-pe", QUICK, k=1, n_folds=1, counts=[0, 2]
        )
        assert [e.n_pseudotokens for e in report.entries] == [0, 2]
