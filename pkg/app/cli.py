"""Command-line entry point: ``python -m app.cli <command> ...``."""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.core.config import configure_logging
from app.core.exceptions import DiscreteJepaError
from app.schemas.configs import (
    PRESETS,
    DecoderConfig,
    EvaluationManifest,
    ExperimentManifest,
    ProbeConfig,
    ProbeProperty,
    TokenView,
    WMVariant,
    WorldModelConfig,
    build_train_config,
    load_yaml,
)
from app.schemas.datasets import Task


logger = logging.getLogger(__name__)


def _config_values(path: Optional[Path]) -> Dict[str, Any]:
    return load_yaml(path) if path is not None else {}


def cmd_generate_data(args: argparse.Namespace) -> None:
    from app.services.dataset_service import DatasetService

    manifest = DatasetService().generate(args.task, args.count, args.length, args.seed, args.out, progress=True)
    logger.info(f"Wrote {manifest.count} sequences to {args.out}")


def cmd_train_tokenizer(args: argparse.Namespace) -> None:
    from app.services.tokenizer_service import TokenizerService

    config = build_train_config(_config_values(args.config), preset=args.preset)
    path = TokenizerService().train_tokenizer(config, resume=args.resume)
    logger.info(f"Tokenizer checkpoint: {path}")


def cmd_train_worldmodel(args: argparse.Namespace) -> None:
    from app.services.worldmodel_service import WorldModelService

    values = _config_values(args.config)
    if args.variant is not None:
        values["variant"] = args.variant
    config = WorldModelConfig.model_validate(values)
    path = WorldModelService().train_worldmodel(config, args.tokenizer, args.dataset)
    logger.info(f"World-model checkpoint: {path}")


def cmd_rollout(args: argparse.Namespace) -> None:
    from app.services.worldmodel_service import WorldModelService

    trace = WorldModelService().rollout_dataset(args.model, args.dataset, args.steps, args.out, args.num_sequences)
    logger.info(
        f"Rolled out {trace.total_steps} steps ({trace.variant.value}); "
        f"feedback membership violations: {trace.feedback_violations}/{trace.feedback_checks}"
    )


def cmd_train_probe(args: argparse.Namespace) -> None:
    from app.services.heads_service import HeadsService

    values = _config_values(args.config)
    values["property"] = args.property
    if args.view is not None:
        values["view"] = args.view
    path = HeadsService().train_probe(args.tokenizer, args.dataset, ProbeConfig.model_validate(values), args.out)
    logger.info(f"Probe checkpoint: {path}")


def cmd_train_decoder(args: argparse.Namespace) -> None:
    from app.services.heads_service import HeadsService

    values = _config_values(args.config)
    if args.view is not None:
        values["view"] = args.view
    path = HeadsService().train_decoder(args.tokenizer, args.dataset, DecoderConfig.model_validate(values), args.out)
    logger.info(f"Decoder checkpoint: {path}")


def cmd_evaluate(args: argparse.Namespace) -> None:
    from app.services.evaluation_service import EvaluationService

    values = load_yaml(args.manifest)
    values["task"] = args.task
    manifest = EvaluationManifest.model_validate(values)
    flags = {key: str(value) for key, value in vars(args).items() if key != "handler"}
    EvaluationService().evaluate(manifest, args.out, flags=flags)


def cmd_plot(args: argparse.Namespace) -> None:
    from app.services.evaluation_service import emit_plots, parse_csv

    paths = emit_plots(parse_csv(args.csv), args.out)
    logger.info(f"Wrote {len(paths)} plots to {args.out}")


async def _run_experiment(manifest: ExperimentManifest) -> Path:
    from app.database.database import SessionLocal, init_db
    from app.services.experiment_service import ExperimentService

    await init_db()
    async with SessionLocal() as db:
        return await ExperimentService().run_experiment(manifest, db)


def cmd_run_experiment(args: argparse.Namespace) -> None:
    manifest = ExperimentManifest.model_validate(load_yaml(args.manifest))
    report = asyncio.run(_run_experiment(manifest))
    logger.info(f"Report: {report}")


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="djepa", description="Desk-scale Discrete-JEPA pipeline")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)
    tasks = [t.value for t in Task]
    views = [v.value for v in TokenView]

    p = sub.add_parser("generate-data", help="Generate a synthetic dataset")
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_generate_data)

    p = sub.add_parser("train-tokenizer", help="Train a Discrete-JEPA or I-JEPA tokenizer")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--resume", type=Path, default=None)
    p.set_defaults(handler=cmd_train_tokenizer)

    p = sub.add_parser("train-worldmodel", help="Train a token world model")
    p.add_argument("--variant", choices=[v.value for v in WMVariant], default=None)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(handler=cmd_train_worldmodel)

    p = sub.add_parser("rollout", help="Roll out a trained world model and save the trace")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-sequences", type=int, default=None)
    p.set_defaults(handler=cmd_rollout)

    p = sub.add_parser("train-probe", help="Train a linear probe on frozen tokens")
    p.add_argument("--property", choices=[prop.value for prop in ProbeProperty], required=True)
    p.add_argument("--view", choices=views, default=None)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(handler=cmd_train_probe)

    p = sub.add_parser("train-decoder", help="Train the pixel-class decoder on Blinking-Ball frames")
    p.add_argument("--view", choices=views, default=None)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(handler=cmd_train_decoder)

    p = sub.add_parser("evaluate", help="Evaluate long-horizon rollouts")
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("plot", help="Re-render plots from a curves CSV")
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser("run-experiment", help="Run a full, resumable pipeline")
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(handler=cmd_run_experiment)

    p = sub.add_parser("serve", help="Serve the HTTP API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        args.handler(args)
    except (DiscreteJepaError, ValidationError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
