"""sweep / allocate sub-commands."""

import argparse
import logging

from tabulate import tabulate

from app.cli.commands.pipeline import add_common_arguments, get_pipeline_service, run_config_from_args
from app.models.plan import Component

logger = logging.getLogger(__name__)


def handle_sweep(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    components = [Component(c) for c in args.components] if args.components else list(Component)
    frame = get_pipeline_service().sweep(config, args.workdir, components)
    print(tabulate(frame, headers="keys", tablefmt="github", showindex=False, floatfmt=".4e"))
    return 0


def handle_allocate(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    plan = get_pipeline_service().allocate(config, args.workdir)
    rows = [[index, layer.r_qk, layer.r_vo, layer.r_mlp] for index, layer in enumerate(plan.layers)]
    print(tabulate(rows, headers=["layer", "r_qk", "r_vo", "r_mlp"], tablefmt="github"))
    return 0


def register(subparsers) -> None:
    sweep = subparsers.add_parser("sweep", help="Objective and functional error along every rank")
    add_common_arguments(sweep)
    sweep.add_argument(
        "--component",
        dest="components",
        action="append",
        choices=[c.value for c in Component],
        help="Restrict the sweep to one component (repeatable)",
    )
    sweep.set_defaults(handler=handle_sweep)

    allocate = subparsers.add_parser("allocate", help="Greedy mixed-rank plan under the parameter budget")
    add_common_arguments(allocate)
    allocate.set_defaults(handler=handle_allocate)
