"""generate / calibrate / compress / evaluate sub-commands."""

import argparse
import json
import logging
from pathlib import Path

from pydantic import ValidationError

from app.core.config import load_run_config
from app.core.exceptions import ConfigurationError
from app.models.plan import CompressionPlan
from app.models.run_config import RunConfig
from app.services.evaluation import report_table
from app.services.pipeline_service import PipelineService, PipelineServiceInterface

logger = logging.getLogger(__name__)

# Create a single instance of the pipeline service
_pipeline_service_instance = None


def get_pipeline_service() -> PipelineServiceInterface:
    """Get the shared pipeline service instance."""
    global _pipeline_service_instance
    if _pipeline_service_instance is None:
        _pipeline_service_instance = PipelineService()
    return _pipeline_service_instance


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    parser.add_argument("--workdir", type=Path, default=Path("runs/default"), help="Directory holding the stores")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a configuration field, e.g. --set model.rope_enabled=true",
    )
    parser.add_argument("--seed", type=int, default=None, help="Shorthand for --set seed=N")


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    """CLI flags override the config file, which overrides defaults."""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "ratio", None) is not None:
        overrides.append(f"compression.ratio={args.ratio}")
    config = load_run_config(args.config, overrides)
    plan_file = getattr(args, "plan", None)
    if plan_file is not None:
        try:
            plan = CompressionPlan.model_validate(json.loads(Path(plan_file).read_text()))
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            raise ConfigurationError(f"cannot load plan {plan_file}", details=str(e))
        config = config.model_copy(update={"compression": config.compression.model_copy(update={"plan": plan})})
    return config


def handle_generate(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    get_pipeline_service().generate(config, args.workdir)
    return 0


def handle_calibrate(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    get_pipeline_service().calibrate(config, args.workdir)
    return 0


def handle_compress(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    plan = get_pipeline_service().compress(config, args.workdir)
    for index, layer in enumerate(plan.layers):
        print(f"layer {index}: r_qk={layer.r_qk} r_vo={layer.r_vo} r_mlp={layer.r_mlp} ov={layer.ov_variant.value}")
    return 0


def handle_evaluate(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    report = get_pipeline_service().evaluate(config, args.workdir)
    print(report_table(report))
    print(f"ratio={report.ratio:.4f} ratio_with_embeddings={report.ratio_with_embeddings:.4f}")
    return 0


def register(subparsers) -> None:
    generate = subparsers.add_parser("generate", help="Write a seeded random model")
    add_common_arguments(generate)
    generate.set_defaults(handler=handle_generate)

    calibrate = subparsers.add_parser("calibrate", help="Collect per-layer autocorrelation statistics")
    add_common_arguments(calibrate)
    calibrate.set_defaults(handler=handle_calibrate)

    compress = subparsers.add_parser("compress", help="Compress QK, OV and MLP of every layer")
    add_common_arguments(compress)
    compress.add_argument("--ratio", type=float, default=None, help="Fraction of attention+MLP parameters to remove")
    compress.add_argument("--plan", type=Path, default=None, help="Explicit plan JSON, e.g. from allocate")
    compress.set_defaults(handler=handle_compress)

    evaluate = subparsers.add_parser("evaluate", help="Measure functional errors and write the report")
    add_common_arguments(evaluate)
    evaluate.set_defaults(handler=handle_evaluate)
