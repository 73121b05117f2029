"""
pretrain, intermediate, fewshot, grid and sweep
"""

import argparse
from pathlib import Path

import structlog

from commands.common import (
    add_hyperparams,
    add_seed,
    add_task_inputs,
    echo_config,
    hyperparams_from,
    load_task_inputs,
    output_dir,
    require_paths,
    write_json,
)
from config import settings
from corpus import load_jsonl
from encoder import init_model, load_checkpoint, partition_parameters, save_checkpoint
from models import EncoderConfig, HyperparamSpace, RunConfig, TaskSpec, TaskKind, TrainMode
from serve import save_delta
from trainer import (
    SWEEP_COUNTS,
    compare_checkpoints,
    grid_search,
    intermediate_train,
    pretrain_mlm,
    pseudotoken_sweep,
    run_fewshot,
)
from vocab import build_vocab

logger = structlog.get_logger(__name__)

CHECKPOINT_DIR = "checkpoint"
MODES = [m.value for m in TrainMode]


def register(subparsers) -> None:
    pretrain = subparsers.add_parser("pretrain", help="build a vocabulary and MLM-pretrain a base checkpoint")
    pretrain.add_argument("--corpus", required=True, help="text file, one document per line")
    pretrain.add_argument("--steps", type=int, default=settings.PRETRAIN_STEPS)
    pretrain.add_argument("--vocab-size", type=int, default=settings.VOCAB_MAX_SIZE)
    pretrain.add_argument("--capacity", type=int, default=settings.PSEUDOTOKEN_CAPACITY)
    pretrain.add_argument("--d-model", type=int, default=64)
    pretrain.add_argument("--n-layers", type=int, default=4)
    pretrain.add_argument("--n-heads", type=int, default=4)
    pretrain.add_argument("--d-ff", type=int, default=256)
    pretrain.add_argument("--max-seq", type=int, default=64)
    pretrain.add_argument("--gelu", choices=settings.GELU_VARIANTS, default=settings.GELU)
    pretrain.add_argument("--mask-strategy", choices=["standard", "mask_only"], default="standard")
    pretrain.add_argument("--out", help="output directory")
    add_seed(pretrain)
    add_hyperparams(pretrain, lr=settings.PRETRAIN_LR)
    pretrain.set_defaults(handler=pretrain_command)

    intermediate = subparsers.add_parser("intermediate", help="full fine-tuning on entailment pairs")
    intermediate.add_argument("--checkpoint", required=True)
    intermediate.add_argument("--train", required=True, help="NLI training JSONL")
    intermediate.add_argument("--test", help="NLI held-out JSONL")
    intermediate.add_argument("--out", help="output directory")
    add_seed(intermediate)
    add_hyperparams(intermediate, lr=settings.INTERMEDIATE_LR, epochs=settings.INTERMEDIATE_EPOCHS)
    intermediate.set_defaults(handler=intermediate_command)

    fewshot = subparsers.add_parser("fewshot", help="k-shot training over disjoint folds")
    _fewshot_options(fewshot)
    fewshot.add_argument("--grid", action="store_true", help="pick hyperparameters by grid search on a dev fold first")
    fewshot.add_argument("--parallel", action="store_true", help="train folds in worker processes")
    fewshot.set_defaults(handler=fewshot_command)

    grid = subparsers.add_parser("grid", help="hyperparameter grid search on a dev fold")
    _fewshot_options(grid)
    grid.set_defaults(handler=grid_command)

    sweep = subparsers.add_parser("sweep", help="few-shot protocol per pseudotoken count")
    _fewshot_options(sweep)
    sweep.add_argument("--counts", type=_counts, default=list(SWEEP_COUNTS), help="comma-separated pseudotoken counts")
    sweep.set_defaults(handler=sweep_command)


def _counts(text: str):
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fewshot_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, action="append", help="repeat to compare checkpoints")
    add_task_inputs(parser)
    parser.add_argument("--mode", choices=MODES, default=TrainMode.DE_PE.value)
    parser.add_argument("--k", type=int, default=settings.K)
    parser.add_argument("--folds", type=int, default=settings.FOLDS)
    parser.add_argument("--symmetric", action="store_true")
    parser.add_argument("--out", help="output directory")
    add_seed(parser)
    add_hyperparams(parser)


def _run_config(args: argparse.Namespace, **extra) -> RunConfig:
    return RunConfig(
        command=args.command,
        paths={
            "checkpoint": ",".join(args.checkpoint),
            "task_spec": args.task_spec,
            "template": args.template,
            "train": args.train,
            "test": args.test,
            "out": args.out,
        },
        mode=TrainMode(args.mode),
        k=args.k,
        folds=args.folds,
        seed=args.seed,
        seeds=[args.seed + i for i in range(args.folds)],
        hyperparams=hyperparams_from(args),
        **extra,
    )


def _check_inputs(args: argparse.Namespace) -> None:
    require_paths(task_spec=args.task_spec, template=args.template, train=args.train, test=args.test)
    for path in args.checkpoint:
        require_paths(checkpoint=path)


def pretrain_command(args: argparse.Namespace) -> int:
    require_paths(corpus=args.corpus)
    out = output_dir(args)
    hp = hyperparams_from(args)
    echo_config(out, RunConfig(
        command=args.command,
        paths={"corpus": args.corpus, "out": str(out)},
        seed=args.seed,
        hyperparams=hp,
        options={"steps": args.steps, "vocab_size": args.vocab_size, "mask_strategy": args.mask_strategy},
    ))

    corpus = [line for line in Path(args.corpus).read_text(encoding="utf-8").splitlines() if line.strip()]
    vocab = build_vocab(corpus, args.vocab_size)
    cfg = EncoderConfig(
        vocab_size=len(vocab),
        pseudotoken_capacity=args.capacity,
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_seq=args.max_seq,
        gelu=args.gelu,
    )
    model = init_model(cfg, args.seed, vocab)
    result = pretrain_mlm(model, corpus, args.steps, hp, args.mask_strategy)
    save_checkpoint(result.model, out / CHECKPOINT_DIR, metadata={"initial_loss": result.initial_loss, "final_loss": result.final_loss})
    return 0


def intermediate_command(args: argparse.Namespace) -> int:
    require_paths(checkpoint=args.checkpoint, train=args.train, test=args.test)
    out = output_dir(args)
    hp = hyperparams_from(args)
    echo_config(out, RunConfig(
        command=args.command,
        paths={"checkpoint": args.checkpoint, "train": args.train, "test": args.test, "out": str(out)},
        seed=args.seed,
        hyperparams=hp,
    ))

    spec = TaskSpec(name="nli", kind=TaskKind.PAIR, num_classes=2)
    train = load_jsonl(Path(args.train), spec, split="train")
    test = load_jsonl(Path(args.test), spec, split="test") if args.test else []
    model = load_checkpoint(Path(args.checkpoint))
    result = intermediate_train(model, train, hp, test)
    save_checkpoint(result.model, out / CHECKPOINT_DIR, metadata={"accuracy": result.accuracy})
    return 0


def fewshot_command(args: argparse.Namespace) -> int:
    _check_inputs(args)
    out = output_dir(args)
    echo_config(out, _run_config(args, grid=args.grid, options={"symmetric": args.symmetric, "parallel": args.parallel}))
    spec, template, dataset = load_task_inputs(args)
    hp = hyperparams_from(args)
    mode = TrainMode(args.mode)

    if len(args.checkpoint) > 1:
        models = {path: load_checkpoint(Path(path)) for path in args.checkpoint}
        reports = compare_checkpoints(models, spec, dataset, template, mode, hp, args.k, args.folds, args.seed, args.symmetric)
        for i, (path, report) in enumerate(reports.items()):
            sub = out / f"checkpoint-{i}"
            sub.mkdir(parents=True, exist_ok=True)
            write_json(sub / "report.json", report)
        write_json(out / "comparison.json", {path: report.formatted for path, report in reports.items()})
        return 0

    model = load_checkpoint(Path(args.checkpoint[0]))
    if args.grid:
        grid = grid_search(HyperparamSpace(), model, spec, dataset, template, mode, args.k, args.folds, args.seed, hp, args.symmetric)
        write_json(out / "grid.json", grid)
        hp = grid.best

    run = run_fewshot(model, spec, dataset, template, mode, hp, args.k, args.folds, args.seed, args.symmetric, args.parallel)
    for fold, result in zip(run.folds, run.results):
        fold_dir = out / f"fold-{fold.index}"
        save_delta(result.delta, fold_dir / "delta")
        write_json(fold_dir / "fold.json", fold)
        if mode == TrainMode.DE:
            save_checkpoint(result.model, fold_dir / "model", partition_parameters(result.model, mode.partition, spec.name))
    write_json(out / "report.json", run.report)
    logger.info("fewshot_finished", task=spec.name, mode=mode.value, result=run.report.formatted, out=str(out))
    return 0


def grid_command(args: argparse.Namespace) -> int:
    _check_inputs(args)
    out = output_dir(args)
    echo_config(out, _run_config(args, grid=True))
    spec, template, dataset = load_task_inputs(args)
    model = load_checkpoint(Path(args.checkpoint[0]))
    report = grid_search(
        HyperparamSpace(), model, spec, dataset, template, args.mode,
        args.k, args.folds, args.seed, hyperparams_from(args), args.symmetric,
    )
    write_json(out / "grid.json", report)
    return 0


def sweep_command(args: argparse.Namespace) -> int:
    _check_inputs(args)
    counts = args.counts
    out = output_dir(args)
    echo_config(out, _run_config(args, options={"counts": counts, "symmetric": args.symmetric}))
    spec, template, dataset = load_task_inputs(args)
    model = load_checkpoint(Path(args.checkpoint[0]))
    report = pseudotoken_sweep(
        model, spec, dataset, template, args.mode, hyperparams_from(args),
        args.k, args.folds, args.seed, counts, args.symmetric,
    )
    write_json(out / "sweep.json", report)
    for entry in report.entries:
        print(f"{entry.n_pseudotokens}\t{entry.report.formatted}")
    return 0
