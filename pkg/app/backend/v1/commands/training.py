import argparse
from pathlib import Path

from app.backend.services.experiments import experiment_service
from app.backend.v1.commands.common import add_config_args, add_force, load_config


def pretrain(args: argparse.Namespace) -> int:
    run_dir = experiment_service.phase(load_config(args), "pretrain", force=args.force)
    print(run_dir.checkpoint("pretrain"))
    return 0


def train(args: argparse.Namespace) -> int:
    run_dir = experiment_service.phase(
        load_config(args), "train", force=args.force, init=args.init, reinit_heads=args.reinit_heads
    )
    print(run_dir.checkpoint("train"))
    return 0


def finetune(args: argparse.Namespace) -> int:
    run_dir = experiment_service.phase(load_config(args), "finetune", force=args.force)
    print(run_dir.checkpoint("finetune"))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("pretrain", help="run the configured pretraining objective")
    add_config_args(parser)
    add_force(parser)
    parser.set_defaults(handler=pretrain)

    parser = subparsers.add_parser("train", help="one-step training (starts from the pretrain checkpoint if present)")
    add_config_args(parser)
    add_force(parser)
    parser.add_argument("--init", type=Path, default=None, help="checkpoint to partially load first")
    parser.add_argument("--reinit-heads", action="store_true", help="reinitialize output heads after loading")
    parser.set_defaults(handler=train)

    parser = subparsers.add_parser("finetune", help="multi-step fine-tuning from the train checkpoint")
    add_config_args(parser)
    add_force(parser)
    parser.set_defaults(handler=finetune)
