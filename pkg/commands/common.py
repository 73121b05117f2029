"""
Helpers shared by the command modules: output locations, config echo,
path checks and the option groups several commands accept.
"""

import argparse
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import structlog
from pydantic import BaseModel

from config import settings
from corpus import LabeledDataset, builtin_template, load_jsonl, load_task_spec, load_template
from errors import InputError
from models import Hyperparams, RunConfig, TaskSpec, Template

logger = structlog.get_logger(__name__)

CONFIG_ECHO = "config.json"


def output_dir(args: argparse.Namespace) -> Path:
    """--out, or <DE_OUTPUT_DIR>/<command>"""
    path = Path(args.out) if getattr(args, "out", None) else Path(settings.OUTPUT_DIR) / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def require_paths(**paths: Optional[str]) -> Dict[str, Optional[str]]:
    """Fail before any compute when a referenced input is missing"""
    for flag, value in paths.items():
        if value is not None and not Path(value).exists():
            raise InputError(f"--{flag.replace('_', '-')} {value} does not exist")
    return dict(paths)


def write_json(path: Path, payload) -> None:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2, by_alias=True)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def echo_config(out: Path, run: RunConfig) -> None:
    write_json(out / CONFIG_ECHO, run)
    logger.info("run_started", command=run.command, output=str(out), seed=run.seed)


def add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=settings.SEED, help="master seed for every stochastic step")


def add_hyperparams(parser: argparse.ArgumentParser, lr: float = None, epochs: int = None) -> None:
    defaults = Hyperparams()
    group = parser.add_argument_group("hyperparameters")
    group.add_argument("--lr", type=float, default=lr if lr is not None else defaults.learning_rate)
    group.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    group.add_argument("--batch-size", type=int, default=defaults.batch_size)
    group.add_argument("--grad-accum", type=int, default=defaults.grad_accum)
    group.add_argument("--epochs", type=int, default=epochs if epochs is not None else defaults.epochs)
    group.add_argument("--patience", type=int, default=defaults.patience)


def hyperparams_from(args: argparse.Namespace) -> Hyperparams:
    return Hyperparams(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        grad_accum=args.grad_accum,
        epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
    )


def add_task_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--task-spec", required=True, help="task spec JSON")
    parser.add_argument("--template", help="template JSON (default: built-in template for the task kind)")
    parser.add_argument("--n-pseudotokens", type=int, help="override the template's pseudotoken count")
    parser.add_argument("--train", required=True, help="training split JSONL")
    parser.add_argument("--test", required=True, help="test split JSONL")


def load_task_inputs(args: argparse.Namespace) -> Tuple[TaskSpec, Template, LabeledDataset]:
    spec = load_task_spec(Path(args.task_spec))
    if args.template:
        template = load_template(Path(args.template))
    elif spec.template_file:
        # relative to the task spec
        template = load_template(Path(args.task_spec).parent / spec.template_file)
    else:
        template = builtin_template(spec)
    if args.n_pseudotokens is not None:
        template = template.model_copy(update={"n_pseudotokens": args.n_pseudotokens})
    train = load_jsonl(Path(args.train), spec, split="train")
    test = load_jsonl(Path(args.test), spec, split="test")
    return spec, template, LabeledDataset(name=spec.name, num_classes=spec.num_classes, train=train, test=test)
