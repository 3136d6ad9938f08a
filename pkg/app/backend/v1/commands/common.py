import argparse
from pathlib import Path

from app.backend.schemas import ExperimentConfig
from app.backend.services.experiments import experiment_service


def add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, required=True, help="experiment YAML")
    parser.add_argument("--run-id", default=None, help="override run_id from the config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def add_force(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--force", action="store_true", help="overwrite existing artifacts")


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    return experiment_service.load_config(args.config, run_id=args.run_id, seed=args.seed)
