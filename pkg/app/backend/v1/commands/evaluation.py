import argparse
from pathlib import Path

from app.backend.runs import RunDirectory
from app.backend.services.experiments import experiment_service
from app.backend.services.plotting import plot_results
from app.backend.v1.commands.common import add_config_args, add_force, load_config


def evaluate(args: argparse.Namespace) -> int:
    run_dir = experiment_service.phase(load_config(args), "evaluate", force=args.force)
    print(run_dir.metrics_path)
    return 0


def rollout(args: argparse.Namespace) -> int:
    path = experiment_service.export_rollout(load_config(args), args.start, args.steps, args.out)
    print(path)
    return 0


def plot(args: argparse.Namespace) -> int:
    """Re-plot a finished run from its stored metrics."""
    run_dir = RunDirectory(args.run_dir)
    label = run_dir.read_config().axis_label
    results = experiment_service.to_results(run_dir.read_metrics(), label)
    for path in plot_results(results, args.out or run_dir.plots):
        print(path)
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("evaluate", help="rollout metrics per horizon on the test split")
    add_config_args(parser)
    add_force(parser)
    parser.set_defaults(handler=evaluate)

    parser = subparsers.add_parser("rollout", help="export a denormalized rollout as a dataset container")
    add_config_args(parser)
    parser.add_argument("--start", type=int, default=0, help="index of the first input step")
    parser.add_argument("--steps", type=int, default=4, help="number of autoregressive steps")
    parser.add_argument("--out", type=Path, default=None)
    parser.set_defaults(handler=rollout)

    parser = subparsers.add_parser("plot", help="re-plot a run's metrics.csv")
    parser.add_argument("run_dir", type=Path)
    parser.add_argument("--out", type=Path, default=None)
    parser.set_defaults(handler=plot)
