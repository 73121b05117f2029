"""
End-to-end command line runs on a desk-sized model
"""

import json

import pytest

from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, dispatch

TINY_MODEL = [
    "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32",
    "--max-seq", "32", "--capacity", "32",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(["gen-data", "--task", "mlm", "--n", "400", "--out", str(root / "mlm")]) == EXIT_OK
    assert dispatch(["gen-data", "--task", "sentiment", "--n", "400", "--out", str(root / "sst")]) == EXIT_OK
    assert dispatch([
        "pretrain", "--corpus", str(root / "mlm" / "corpus.txt"), "--steps", "2", *TINY_MODEL,
        "--out", str(root / "base"),
    ]) == EXIT_OK
    return root


def task_args(root):
    sst = root / "sst"
    return [
        "--checkpoint", str(root / "base" / "checkpoint"),
        "--task-spec", str(sst / "task.json"),
        "--train", str(sst / "train.jsonl"),
        "--test", str(sst / "test.jsonl"),
    ]


@pytest.fixture(scope="module")
def fewshot_run(workspace):
    out = workspace / "run"
    code = dispatch([
        "fewshot", *task_args(workspace), "--mode", "de-pe", "--k", "16", "--folds", "5", "--seed", "7",
        "--epochs", "1", "--out", str(out),
    ])
    assert code == EXIT_OK
    return out


def test_gen_data_outputs(workspace):
    sst = workspace / "sst"
    for name in ("train.jsonl", "test.jsonl", "task.json", "template.json", "config.json"):
        assert (sst / name).is_file(), name
    assert len((sst / "test.jsonl").read_text().splitlines()) == 100
    assert len((workspace / "mlm" / "corpus.txt").read_text().splitlines()) == 400


def test_pretrain_writes_checkpoint(workspace):
    checkpoint = workspace / "base" / "checkpoint"
    manifest = json.loads((checkpoint / "manifest.json").read_text())
    assert manifest["kind"] == "checkpoint"
    assert manifest["lineage"][0]["stage"] == "pretrain"
    assert (checkpoint / "vocab.txt").is_file()


def test_inspect(workspace, capsys):
    assert dispatch(["inspect", str(workspace / "base" / "checkpoint")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert set(summary["modes"]) == {"full", "efficient", "head_only"}
    assert summary["modes"]["full"]["ratio"] == "1.000000"
    assert summary["modes"]["head_only"]["trainable"] == 16 * 2 + 2
    assert summary["parameters"] == summary["modes"]["full"]["total"]


def test_fewshot_writes_five_deltas_and_report(fewshot_run):
    for i in range(5):
        assert (fewshot_run / f"fold-{i}" / "delta" / "manifest.json").is_file()
        assert not (fewshot_run / f"fold-{i}" / "model").exists()
    report = json.loads((fewshot_run / "report.json").read_text())
    assert len(report["scores"]) == 5
    assert report["seeds"] == [7, 8, 9, 10, 11]
    assert report["mode"] == "de-pe"
    config = json.loads((fewshot_run / "config.json").read_text())
    assert config["k"] == 16 and config["folds"] == 5


def test_rerun_is_byte_identical(workspace, fewshot_run):
    rerun = workspace / "rerun"
    code = dispatch([
        "fewshot", *task_args(workspace), "--mode", "de-pe", "--k", "16", "--folds", "5", "--seed", "7",
        "--epochs", "1", "--out", str(rerun),
    ])
    assert code == EXIT_OK
    assert (rerun / "report.json").read_bytes() == (fewshot_run / "report.json").read_bytes()
    for i in range(5):
        for name in ("manifest.json", "weights.bin"):
            first = fewshot_run / f"fold-{i}" / "delta" / name
            second = rerun / f"fold-{i}" / "delta" / name
            assert first.read_bytes() == second.read_bytes(), f"fold-{i}/{name}"


def test_fewshot_accepts_files_without_ids(workspace):
    sst = workspace / "sst"
    bare = workspace / "bare"
    bare.mkdir()
    for split in ("train", "test"):
        records = [json.loads(line) for line in (sst / f"{split}.jsonl").read_text().splitlines()]
        (bare / f"{split}.jsonl").write_text(
            "".join(json.dumps({"s1": r["s1"], "label": r["label"]}) + "\n" for r in records)
        )
    code = dispatch([
        "fewshot", "--checkpoint", str(workspace / "base" / "checkpoint"),
        "--task-spec", str(sst / "task.json"),
        "--train", str(bare / "train.jsonl"), "--test", str(bare / "test.jsonl"),
        "--k", "4", "--folds", "1", "--epochs", "1", "--out", str(workspace / "bare-run"),
    ])
    assert code == EXIT_OK
    assert (workspace / "bare-run" / "report.json").is_file()


def test_eval_reproduces_report(workspace, fewshot_run, capsys):
    sst = workspace / "sst"
    code = dispatch([
        "eval", "--checkpoint", str(workspace / "base" / "checkpoint"), "--run", str(fewshot_run),
        "--task-spec", str(sst / "task.json"), "--test", str(sst / "test.jsonl"),
        "--out", str(workspace / "eval"),
    ])
    assert code == EXIT_OK
    evaluation = json.loads((workspace / "eval" / "eval.json").read_text())
    report = json.loads((fewshot_run / "report.json").read_text())
    assert evaluation["scores"] == pytest.approx(report["scores"])
    assert capsys.readouterr().out.strip() == report["formatted"]


def test_infer_keeps_request_order(workspace, fewshot_run):
    requests = workspace / "requests.jsonl"
    lines = [
        {"id": "b", "task": "sentiment", "s1": "the film was lovely"},
        {"id": "a", "task": "sentiment", "s1": "a dull script"},
        {"id": "c", "task": "unknown", "s1": "anything"},
    ]
    requests.write_text("".join(json.dumps(line) + "\n" for line in lines))
    code = dispatch([
        "infer", "--checkpoint", str(workspace / "base" / "checkpoint"),
        "--delta", str(fewshot_run / "fold-0" / "delta"),
        "--batch", str(requests), "--out", str(workspace / "infer"),
    ])
    assert code == EXIT_OK
    results = [json.loads(line) for line in (workspace / "infer" / "results.jsonl").read_text().splitlines()]
    assert [r["id"] for r in results] == ["b", "a", "c"]
    assert results[0]["class"] in (0, 1)
    assert "error" in results[2]


def test_duplicate_delta_without_replace(workspace, fewshot_run):
    delta = str(fewshot_run / "fold-0" / "delta")
    requests = workspace / "requests-one.jsonl"
    requests.write_text(json.dumps({"id": "1", "task": "sentiment", "s1": "fun"}) + "\n")
    base = ["infer", "--checkpoint", str(workspace / "base" / "checkpoint"), "--batch", str(requests),
            "--out", str(workspace / "infer-dup"), "--delta", delta, "--delta", delta]
    assert dispatch(base) == EXIT_RUNTIME
    assert dispatch(base + ["--replace"]) == EXIT_OK


class TestExitCodes:
    def test_help(self):
        assert dispatch(["--help"]) == EXIT_OK

    def test_no_command(self):
        assert dispatch([]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert dispatch(["inspect", "x", "--bogus"]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_bad_choice(self, workspace):
        assert dispatch(["fewshot", *task_args(workspace), "--mode", "lora"]) == EXIT_USAGE

    def test_bad_sweep_counts(self, workspace):
        assert dispatch(["sweep", *task_args(workspace), "--counts", "two,five"]) == EXIT_USAGE

    def test_missing_input(self, tmp_path):
        assert dispatch(["pretrain", "--corpus", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == EXIT_RUNTIME

    def test_domain_error(self, tmp_path):
        assert dispatch(["gen-data", "--task", "sentiment", "--n", "15", "--out", str(tmp_path)]) == EXIT_RUNTIME
