"""
eval and inspect
"""

import argparse
import json
import sys
from pathlib import Path

import structlog

from commands.common import add_seed, echo_config, output_dir, require_paths, write_json
from corpus import load_jsonl, load_task_spec
from encoder import backbone_fingerprint, format_ratio, load_checkpoint, parameter_count, partition_parameters, trainable_ratio
from errors import InputError
from models import PartitionMode, RunConfig
from serve import load_delta
from trainer import evaluate

logger = structlog.get_logger(__name__)


def register(subparsers) -> None:
    ev = subparsers.add_parser("eval", help="score a fewshot run's fold deltas on a test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--run", required=True, help="fewshot output directory holding fold-<i>/delta")
    ev.add_argument("--task-spec", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--out", help="output directory")
    add_seed(ev)
    ev.set_defaults(handler=eval_command)

    inspect = subparsers.add_parser("inspect", help="parameter counts and trainable ratio per partition mode")
    inspect.add_argument("checkpoint")
    inspect.add_argument("--task", help="restrict efficient mode to one task's pseudotokens")
    inspect.set_defaults(handler=inspect_command)


def eval_command(args: argparse.Namespace) -> int:
    require_paths(checkpoint=args.checkpoint, run=args.run, task_spec=args.task_spec, test=args.test)
    out = output_dir(args)
    echo_config(out, RunConfig(
        command=args.command,
        paths={"checkpoint": args.checkpoint, "run": args.run, "task_spec": args.task_spec, "test": args.test},
        seed=args.seed,
    ))
    spec = load_task_spec(Path(args.task_spec))
    test = load_jsonl(Path(args.test), spec, split="test")

    fold_dirs = sorted(Path(args.run).glob("fold-*"), key=lambda p: int(p.name.split("-")[1]))
    if not fold_dirs:
        raise InputError(f"{args.run} holds no fold-<i> directories")
    deltas = [load_delta(d / "delta") for d in fold_dirs]
    models = None
    if all((d / "model").is_dir() for d in fold_dirs):
        models = [load_checkpoint(d / "model") for d in fold_dirs]

    model = load_checkpoint(Path(args.checkpoint))
    report = evaluate(model, deltas, spec, test, models)
    write_json(out / "eval.json", report)
    print(report.formatted)
    return 0


def inspect_command(args: argparse.Namespace) -> int:
    require_paths(checkpoint=args.checkpoint)
    model = load_checkpoint(Path(args.checkpoint))
    modes = {}
    for mode in PartitionMode:
        partition = partition_parameters(model, mode, args.task)
        modes[mode.value] = {
            "trainable": partition.trainable_count,
            "total": partition.total_count,
            "ratio": format_ratio(trainable_ratio(partition)),
        }
    summary = {
        "checkpoint": args.checkpoint,
        "config": model.config.model_dump(mode="json"),
        "parameters": parameter_count(model.config),
        "fingerprint": backbone_fingerprint(model),
        "registry": model.registry.to_dict() if model.registry else {},
        "lineage": [entry.model_dump(mode="json") for entry in model.lineage],
        "modes": modes,
    }
    sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0
