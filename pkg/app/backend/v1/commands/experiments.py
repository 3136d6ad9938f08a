import argparse
from pathlib import Path

import yaml

from app.backend.services.experiments import experiment_service
from app.backend.v1.commands.common import add_config_args, add_force, load_config


def run(args: argparse.Namespace) -> int:
    run_dir = experiment_service.run(load_config(args), force=args.force)
    print(run_dir.root)
    return 0


def matrix(args: argparse.Namespace) -> int:
    values = [yaml.safe_load(v) for v in args.values]
    for run_dir in experiment_service.matrix(load_config(args), args.key, values, force=args.force):
        print(run_dir.root)
    return 0


def compare(args: argparse.Namespace) -> int:
    experiment_service.compare(args.run_dirs, args.out, default=args.default, horizon=args.horizon)
    print(args.out / "results.csv")
    return 0


def count_params(args: argparse.Namespace) -> int:
    table = experiment_service.count_params(load_config(args))
    print(table.to_string(index=False))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("run", help="pretrain? -> train -> finetune? -> evaluate")
    add_config_args(parser)
    add_force(parser)
    parser.set_defaults(handler=run)

    parser = subparsers.add_parser("matrix", help="one run per value of a single config key")
    add_config_args(parser)
    add_force(parser)
    parser.add_argument("--key", required=True, help="dotted config path or unique key suffix")
    parser.add_argument("--values", nargs="+", required=True, help="YAML scalars, one per run")
    parser.set_defaults(handler=matrix)

    parser = subparsers.add_parser("compare", help="merge finished runs into results.csv and figures")
    parser.add_argument("run_dirs", type=Path, nargs="+")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--default", default=None, help="run_id or label of the default configuration")
    parser.add_argument("--horizon", type=int, default=None, help="horizon for the marginal-contribution bars")
    parser.set_defaults(handler=compare)

    parser = subparsers.add_parser("count-params", help="parameter counts, configured and full scale")
    add_config_args(parser)
    parser.set_defaults(handler=count_params)
