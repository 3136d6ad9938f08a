import argparse
from pathlib import Path

from app.backend.errors import ConfigError, RunExistsError
from app.backend.schemas import SyntheticRecipe
from app.backend.services.experiments import experiment_service
from app.backend.storage import store
from config.settings import settings
from data.synthetic import GENERATORS, generate_synthetic


def generate_data(args: argparse.Namespace) -> int:
    """Write a synthetic dataset container from a config's recipe or from flags."""
    if args.config is not None:
        config = experiment_service.load_config(args.config, seed=args.seed)
        recipe = config.dataset.synthetic
        if recipe is None:
            raise ConfigError(f"{args.config} does not describe a synthetic dataset")
    else:
        recipe = SyntheticRecipe(
            kind=args.kind,
            n_lat=args.n_lat,
            n_lon=args.n_lon,
            n_times=args.n_times,
            n_channels=args.n_channels,
            seed=args.seed or 0,
        )
    out = args.out or settings.DATA_DIR / recipe.kind
    if (Path(out) / "manifest.yaml").exists() and not args.force:
        raise RunExistsError(f"{out} already holds a dataset (use --force)")
    store.save_series(generate_synthetic(recipe), Path(out), recipe=recipe.model_dump(mode="json"))
    print(out)
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("generate-data", help="write a synthetic dataset container")
    parser.add_argument("--config", type=Path, default=None, help="experiment YAML with dataset.synthetic")
    parser.add_argument("--kind", choices=sorted(GENERATORS), default="solid_rotation_advection")
    parser.add_argument("--n-lat", type=int, default=16)
    parser.add_argument("--n-lon", type=int, default=32)
    parser.add_argument("--n-times", type=int, default=64)
    parser.add_argument("--n-channels", type=int, default=4)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--force", action="store_true")
    parser.set_defaults(handler=generate_data)
