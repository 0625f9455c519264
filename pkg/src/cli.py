"""Command line entry point.

    cliptrain run regression --config configs/regression.conf
    cliptrain run classification --config configs/classification.conf --set train.epochs=5 --timing
    cliptrain inspect runs/latest/checkpoints/mnist_clip_90.ckpt
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from src.config import ConfigError, ExperimentConfig, parse_config, resolve_data_dir
from src.experiments.artifacts import RunArtifacts, StageError
from src.experiments.classification import run_classification
from src.experiments.regression import run_regression
from src.network import CheckpointError, layerwise_lipschitz_bound, read_checkpoint
from src.run_log import configure_logging, log_event

logger = logging.getLogger(__name__)

RECIPES = ("regression", "classification")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cliptrain", description="Lipschitz-regularized training experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run an experiment recipe")
    run.add_argument("recipe", choices=RECIPES)
    run.add_argument("--config", help="dotted key = value config file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    run.add_argument("--timing", action="store_true", help="record wall-clock seconds per stage")
    run.add_argument("--data-dir", help="dataset cache directory (overrides config and $CLIPTRAIN_DATA_DIR)")
    run.add_argument("--output", help="output directory (same as --set output_dir=...)")

    inspect = commands.add_parser("inspect", help="print a checkpoint's header and Lipschitz bound")
    inspect.add_argument("checkpoint")
    return parser


def run_recipe(config: ExperimentConfig, timing: bool = False, data_dir: Optional[str] = None) -> int:
    """Run one recipe and write metrics and manifest; returns the process exit code."""
    configure_logging(config.output_dir)
    artifacts = RunArtifacts(config.output_dir, timing=timing)
    log_event(config.recipe, "start", seed=config.seed, output_dir=str(config.output_dir))

    print(f"Recipe: {config.recipe}")
    print(f"Output: {config.output_dir}")
    print("-" * 60)
    try:
        if config.recipe == "regression":
            run_regression(config, artifacts)
        else:
            run_classification(config, artifacts, resolve_data_dir(config, data_dir))
    except StageError as e:
        logger.error("%s", e)
    finally:
        artifacts.write_metrics()
        artifacts.write_manifest(config.recipe, config.model_dump(mode="json"))

    for stage in artifacts.stages:
        mark = "✓" if stage.status == "ok" else "✗"
        seconds = f" ({stage.seconds:.1f}s)" if stage.seconds is not None else ""
        print(f"  {mark} {stage.name}{seconds}" + (f": {stage.error}" if stage.error else ""))
    print("-" * 60)

    status = "partial" if artifacts.failed else "ok"
    log_event(config.recipe, status, files=len(artifacts.files))
    if artifacts.failed:
        print(f"✗ Run finished with errors; partial artifacts in {config.output_dir}")
        return 1
    print(f"✓ Run complete: {len(artifacts.files)} files in {config.output_dir}")
    return 0


def inspect_checkpoint(path: str) -> int:
    try:
        checkpoint = read_checkpoint(path)
    except (OSError, CheckpointError) as e:
        print(f"✗ {e}")
        return 1
    net = checkpoint.network
    print(f"Checkpoint: {path}")
    print(f"  dims:        {net.dims}")
    print(f"  activations: {net.activations}")
    print(f"  layerwise Lipschitz bound: {layerwise_lipschitz_bound(net):.6g}")
    print(f"  metadata: {json.dumps(checkpoint.metadata, sort_keys=True)}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    print("=" * 60)
    print("cliptrain")
    print("=" * 60)

    if args.command == "inspect":
        configure_logging()
        return inspect_checkpoint(args.checkpoint)

    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"output_dir={args.output}")
    try:
        config = parse_config(args.config, overrides, recipe=args.recipe)
    except ConfigError as e:
        print(f"✗ Invalid configuration: {e}")
        return 2
    return run_recipe(config, timing=args.timing, data_dir=args.data_dir)


if __name__ == "__main__":
    sys.exit(main())
