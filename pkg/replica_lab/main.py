"""Command-line entry point: ``replica-lab <command> [--config FILE] ...``."""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from dotenv import load_dotenv
from loguru import logger

from core import pipeline
from core.config_manager import ConfigManager, RunConfig
from core.error_handler import ErrorHandler
from core.evaluation import EvalReport
from core.tensor import set_finite_checks


def configure_logging(config: RunConfig) -> None:
    """stderr sink at the configured level, plus a serialized file sink when enabled."""
    logger.remove()
    logger.add(sys.stderr, level=config.logging.level.upper(), format="{time:HH:mm:ss} | {level} | {name} | {message}")
    if config.logging.file:
        logs_dir = Path(config.output_dir) / "logs"
        logs_dir.mkdir(parents=True, exist_ok=True)
        logger.add(logs_dir / "replica_{time}.log", level="DEBUG", serialize=True)


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="replica-lab", description="Local image translation and conjunct-attention detection")
    parser.add_argument("--config", type=str, default=None, help="JSON/YAML run config merged over the profile")
    parser.add_argument("--profile", type=str, default=None, help="Config profile (default: $REPLICA_PROFILE or desk)")
    parser.add_argument("--seed", type=int, default=None, help="Override the global seed")
    parser.add_argument("--output-dir", type=str, default=None, help="Override the output directory")
    parser.add_argument(
        "--check-finite", action="store_true", help="Raise on NaN/Inf in any tensor op (same as REPLICA_CHECK_FINITE=1)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="Generate the phantom dataset")
    sub.add_parser("train-ae", help="Overfit the autoencoder")
    sub.add_parser("translate", help="Create translated tumor images")

    det = sub.add_parser("train-det", help="Train the detector")
    group = det.add_mutually_exclusive_group()
    group.add_argument("--with-translation", dest="with_translation", action="store_true", default=True)
    group.add_argument("--baseline", dest="with_translation", action="store_false")

    inf = sub.add_parser("infer", help="Write detections for a split")
    inf.add_argument("--checkpoint", type=str, required=True)
    inf.add_argument("--split", type=str, default="val", choices=("train", "val", "test"))
    inf.add_argument("--out", type=str, default=None)

    ev = sub.add_parser("eval", help="Score detections against a split")
    ev.add_argument("--detections", type=str, required=True)
    ev.add_argument("--split", type=str, default="val", choices=("train", "val", "test"))

    sub.add_parser("gradcheck", help="Finite-difference gradient table")

    for name, text in (("ab", "Baseline vs translation-augmented training"), ("ablation", "All ablation arms")):
        cmp = sub.add_parser(name, help=text)
        cmp.add_argument("--seeds", type=int, nargs="+", default=None)
        cmp.add_argument("--split", type=str, default="val", choices=("train", "val", "test"))
    return parser.parse_args(argv)


def load_config(args: argparse.Namespace) -> RunConfig:
    config = ConfigManager(profile=args.profile).load_run_config(args.config)
    overrides: Dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = Path(args.output_dir).resolve()
    return config.model_copy(update=overrides) if overrides else config


def _command(args: argparse.Namespace) -> Callable[[RunConfig, pipeline.PipelineContext], object]:
    commands: Dict[str, Callable[[RunConfig, pipeline.PipelineContext], object]] = {
        "synth": lambda c, ctx: pipeline.cmd_synth(c, context=ctx),
        "train-ae": lambda c, ctx: pipeline.cmd_train_ae(c, context=ctx),
        "translate": lambda c, ctx: pipeline.cmd_translate(c, context=ctx),
        "train-det": lambda c, ctx: pipeline.cmd_train_det(c, with_translation=args.with_translation, context=ctx),
        "infer": lambda c, ctx: pipeline.cmd_infer(c, args.checkpoint, args.split, out_path=args.out, context=ctx),
        "eval": lambda c, ctx: pipeline.cmd_eval(c, args.detections, args.split, context=ctx),
        "gradcheck": lambda c, ctx: pipeline.cmd_gradcheck(c, context=ctx),
        "ab": lambda c, ctx: pipeline.cmd_ab(c, args.seeds, args.split, context=ctx),
        "ablation": lambda c, ctx: pipeline.cmd_ablation(c, args.seeds, args.split, context=ctx),
    }
    return commands[args.command]


def _report(result: object) -> None:
    if isinstance(result, EvalReport):
        result = result.metrics()
    if isinstance(result, dict):
        for key, value in result.items():
            print(f"{key}: {value}")
    elif isinstance(result, list):
        for row in result:
            print(",".join("" if v is None else str(v) for v in row))


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, configure and execute one command; returns the process exit code."""
    load_dotenv()
    args = parse_args(argv)
    if args.check_finite:
        set_finite_checks(True)
    handler = ErrorHandler(stage=args.command)

    code, config = handler.run(load_config, args)
    if code:
        return code
    configure_logging(config)
    logger.info(f"Running {args.command}", extra={"output_dir": str(config.output_dir), "seed": config.seed})

    code, context = handler.run(pipeline.PipelineContext, config, run_id=handler.run_id)
    if code:
        return code
    code, result = handler.run(_command(args), config, context)
    if code == 0:
        _report(result)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
