"""
Task delta persistence and multi-task inference
"""

import dataclasses
import json
import os

import numpy as np
import pytest

from corpus import BUILTIN_TASKS, LabeledExample, builtin_template, gen_nli, gen_pairs, gen_sentiment
from encoder import init_model, save_checkpoint
from entailment import predict
from errors import CompatibilityError, ConflictError
from models import Hyperparams, InferenceRequest, InferenceResult
from serve import (
    DeltaStore,
    batch_infer,
    load_delta,
    read_requests,
    register_task,
    save_delta,
    sequential_infer,
    write_results,
)
from trainer import sample_folds, train_fewshot

QUICK = Hyperparams(learning_rate=1e-3, batch_size=8, epochs=2, patience=2, seed=7)


def trained_delta(model, dataset, task_name, n_pseudotokens=2, seed=7):
    task = BUILTIN_TASKS[task_name]
    fold = sample_folds(dataset, k=2, n_folds=1, seed=seed)[0]
    return train_fewshot(model, task, fold, dataset.by_id(), builtin_template(task, n_pseudotokens), "de-pe", QUICK).delta


@pytest.fixture
def deltas(tiny_model):
    sentiment = trained_delta(tiny_model, gen_sentiment(40, seed=1), "sentiment")
    nli = trained_delta(tiny_model, gen_nli(40, seed=2), "nli", n_pseudotokens=3)
    pairs = trained_delta(tiny_model, gen_pairs(40, seed=3), "pairs")
    return {"sentiment": sentiment, "nli": nli, "pairs": pairs}


@pytest.fixture
def store(tiny_model, deltas):
    store = DeltaStore(tiny_model)
    for delta in deltas.values():
        register_task(store, delta)
    return store


def mixed_requests(n, seed=0):
    """n requests spread over sentiment, nli and pairs in random order"""
    pools = {
        "sentiment": gen_sentiment(2 * n, seed=seed + 10).examples,
        "nli": gen_nli(2 * n, seed=seed + 20).examples,
        "pairs": gen_pairs(2 * n, seed=seed + 30).examples,
    }
    names = sorted(pools)
    rng = np.random.default_rng(seed)
    requests = []
    for i in range(n):
        task = names[int(rng.integers(len(names)))]
        ex = pools[task][i]
        requests.append(InferenceRequest(id=f"q{i}", task=task, s1=ex.s1, s2=ex.s2))
    return requests


class TestDeltaFiles:
    def test_round_trip(self, deltas, tmp_path):
        delta = deltas["sentiment"]
        save_delta(delta, tmp_path / "delta")
        loaded = load_delta(tmp_path / "delta")
        assert loaded.task == delta.task
        assert loaded.template == delta.template
        assert loaded.layout == delta.layout
        assert loaded.fingerprint == delta.fingerprint
        assert sorted(loaded.rows) == sorted(delta.rows)
        for row, values in delta.rows.items():
            assert np.array_equal(loaded.rows[row], values)
        assert np.array_equal(loaded.head_weight, delta.head_weight)
        assert np.array_equal(loaded.head_bias, delta.head_bias)

    def test_much_smaller_than_backbone(self, tiny_model, deltas, tmp_path):
        save_delta(deltas["sentiment"], tmp_path / "delta")
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        delta_size = os.path.getsize(tmp_path / "delta" / "weights.bin")
        backbone_size = os.path.getsize(tmp_path / "ckpt" / "weights.bin")
        assert delta_size * 20 < backbone_size

    def test_missing_fingerprint(self, deltas, tmp_path):
        save_delta(deltas["sentiment"], tmp_path / "delta")
        manifest_path = tmp_path / "delta" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["fingerprint"] = ""
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(CompatibilityError):
            load_delta(tmp_path / "delta")


class TestRegistration:
    def test_foreign_backbone_rejected(self, tiny_config, vocab, deltas):
        other = DeltaStore(init_model(tiny_config, seed=99, vocab=vocab))
        with pytest.raises(CompatibilityError):
            register_task(other, deltas["sentiment"])

    def test_duplicate_needs_replace(self, store, deltas):
        with pytest.raises(ConflictError):
            register_task(store, deltas["sentiment"])
        replacement = dataclasses.replace(deltas["sentiment"], head_bias=np.array([5.0, -5.0], dtype=np.float32))
        register_task(store, replacement, replace=True)
        assert store.get("sentiment") is replacement

    def test_replace_keeps_old_snapshots_whole(self, store, deltas):
        snapshot = store.snapshot()
        replacement = dataclasses.replace(deltas["sentiment"], head_bias=np.array([5.0, -5.0], dtype=np.float32))
        register_task(store, replacement, replace=True)
        assert snapshot["sentiment"].delta is deltas["sentiment"]
        assert store.snapshot()["sentiment"].delta is replacement

    def test_tasks(self, store):
        assert store.tasks == ["nli", "pairs", "sentiment"]


class TestInference:
    def test_register_then_infer(self, store):
        [result] = batch_infer(store, [InferenceRequest(id="a", task="sentiment", s1="the film was lovely")])
        assert result.error is None
        assert result.class_id in (0, 1)
        assert sum(result.probabilities) == pytest.approx(1.0)

    def test_single_request_matches_predict(self, tiny_model, store, deltas):
        request = InferenceRequest(id="a", task="nli", s1="the dog in the park was big", s2="the dog was small")
        [result] = batch_infer(store, [request])
        direct = predict(tiny_model, deltas["nli"], LabeledExample(s1=request.s1, s2=request.s2, label=0, id="a"))
        assert result.class_id == direct.class_id
        np.testing.assert_allclose(result.logits, direct.logits, atol=1e-5)

    def test_mixed_batch_matches_per_task_runs(self, store):
        requests = mixed_requests(30)
        together = batch_infer(store, requests, max_batch=8)
        by_task = {}
        for task in ("sentiment", "nli", "pairs"):
            for result in batch_infer(store, [r for r in requests if r.task == task]):
                by_task[result.id] = result
        for result in together:
            alone = by_task[result.id]
            assert result.class_id == alone.class_id
            np.testing.assert_allclose(result.logits, alone.logits, atol=1e-5)

    def test_batch_equals_sequential(self, store):
        requests = mixed_requests(100, seed=3)
        assert {r.task for r in requests} == {"sentiment", "nli", "pairs"}
        batched = batch_infer(store, requests, max_batch=16)
        sequential = sequential_infer(store, requests)
        assert [r.id for r in batched] == [r.id for r in sequential] == [r.id for r in requests]
        for a, b in zip(batched, sequential):
            assert a.class_id == b.class_id
            np.testing.assert_allclose(a.logits, b.logits, atol=1e-5)
            np.testing.assert_allclose(a.probabilities, b.probabilities, atol=1e-5)

    def test_unregistered_task_fails_alone(self, store):
        requests = [
            InferenceRequest(id="1", task="sentiment", s1="a dull film"),
            InferenceRequest(id="2", task="topics", s1="a dull film"),
            InferenceRequest(id="3", task="nli", s1="the car was fast", s2="the car was slow"),
        ]
        for infer in (batch_infer, sequential_infer):
            results = infer(store, requests)
            assert [r.id for r in results] == ["1", "2", "3"]
            assert [r.error is None for r in results] == [True, False, True]
            assert "topics" in results[1].error

    def test_empty(self, store):
        assert batch_infer(store, []) == []
        assert sequential_infer(store, []) == []

    def test_deterministic(self, store):
        requests = mixed_requests(10, seed=5)
        assert batch_infer(store, requests) == batch_infer(store, requests)


class TestRequestFiles:
    def test_requests_and_results(self, tmp_path):
        path = tmp_path / "requests.jsonl"
        path.write_text('{"id": "1", "task": "sentiment", "s1": "fun"}\n\n{"id": "2", "task": "nli", "s1": "a", "s2": "b"}\n')
        requests = read_requests(path)
        assert [r.id for r in requests] == ["1", "2"]

        results = [
            InferenceResult(id="1", task="sentiment", class_id=1, probabilities=[0.2, 0.8], logits=[[0.0, 1.4]]),
            InferenceResult(id="2", task="nli", error="task 'nli' is not registered"),
        ]
        write_results(tmp_path / "results.jsonl", results)
        lines = [json.loads(line) for line in (tmp_path / "results.jsonl").read_text().splitlines()]
        assert lines[0]["class"] == 1
        assert lines[1] == {"id": "2", "task": "nli", "error": "task 'nli' is not registered"}
