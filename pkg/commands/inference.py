"""
infer: cross-task batched inference from a request file
"""

import argparse
from pathlib import Path

import structlog

from commands.common import echo_config, output_dir, require_paths
from config import settings
from encoder import hash_units, load_checkpoint
from errors import StateError
from models import RunConfig
from serve import DeltaStore, batch_infer, read_requests, register_task, load_delta, sequential_infer, write_results

logger = structlog.get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("infer", help="serve many task deltas over one backbone")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--delta", required=True, action="append", help="task delta directory; repeat per task")
    parser.add_argument("--batch", required=True, help="request JSONL")
    parser.add_argument("--results", help="result JSONL (default: <out>/results.jsonl)")
    parser.add_argument("--max-batch", type=int, default=settings.MAX_BATCH)
    parser.add_argument("--sequential", action="store_true", help="one request at a time")
    parser.add_argument("--replace", action="store_true", help="later deltas replace earlier ones for the same task")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, default=settings.SEED)
    parser.set_defaults(handler=infer_command)


def infer_command(args: argparse.Namespace) -> int:
    require_paths(checkpoint=args.checkpoint, batch=args.batch)
    for path in args.delta:
        require_paths(delta=path)
    out = output_dir(args)
    results_path = Path(args.results) if args.results else out / "results.jsonl"
    echo_config(out, RunConfig(
        command=args.command,
        paths={"checkpoint": args.checkpoint, "delta": ",".join(args.delta), "batch": args.batch, "results": str(results_path)},
        seed=args.seed,
        options={"max_batch": args.max_batch, "sequential": args.sequential},
    ))

    backbone = load_checkpoint(Path(args.checkpoint))
    store = DeltaStore(backbone)
    for path in args.delta:
        register_task(store, load_delta(Path(path)), replace=args.replace)

    requests = read_requests(Path(args.batch))
    before = hash_units(backbone, backbone.units())
    if args.sequential:
        results = sequential_infer(store, requests)
    else:
        results = batch_infer(store, requests, args.max_batch)
    if hash_units(backbone, backbone.units()) != before:
        raise StateError("backbone parameters changed during inference")

    write_results(results_path, results)
    logger.info("inference_finished", requests=len(requests), errors=sum(1 for r in results if r.error), out=str(results_path))
    return 0
