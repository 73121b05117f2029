"""
gen-data: synthetic datasets, their task specs and templates
"""

import argparse

import structlog

from commands.common import add_seed, echo_config, output_dir, write_json
from corpus import BUILTIN_TASKS, GENERATORS, builtin_template, gen_mlm_corpus, write_jsonl
from models import RunConfig

logger = structlog.get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="generate a synthetic dataset")
    parser.add_argument("--task", required=True, choices=sorted([*GENERATORS, "mlm"]))
    parser.add_argument("--n", type=int, default=400, help="examples (or corpus sentences) to generate")
    parser.add_argument("--out", help="output directory")
    add_seed(parser)
    parser.set_defaults(handler=gen_data)


def gen_data(args: argparse.Namespace) -> int:
    out = output_dir(args)
    echo_config(out, RunConfig(
        command=args.command,
        paths={"out": str(out)},
        task=args.task,
        seed=args.seed,
        options={"n": args.n},
    ))

    if args.task == "mlm":
        sentences = gen_mlm_corpus(args.n, args.seed)
        (out / "corpus.txt").write_text("".join(f"{s}\n" for s in sentences), encoding="utf-8")
        logger.info("corpus_written", path=str(out / "corpus.txt"), sentences=len(sentences))
        return 0

    dataset = GENERATORS[args.task](args.n, args.seed)
    spec = BUILTIN_TASKS[args.task]
    write_jsonl(out / "train.jsonl", dataset.train)
    write_jsonl(out / "test.jsonl", dataset.test)
    write_json(out / "task.json", spec.model_copy(update={"template_file": "template.json"}))
    write_json(out / "template.json", builtin_template(spec))
    logger.info("dataset_written", task=args.task, train=len(dataset.train), test=len(dataset.test), out=str(out))
    return 0
