"""Declarative experiment runs, one-axis ablation matrices and result aggregation."""

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import yaml
from pydantic import ValidationError
from torch import nn

from app.backend.errors import CheckpointError, ConfigError, DataError, RunExistsError, WeatherDesignError
from app.backend.models.registry import build_model, count_parameters
from app.backend.models.unet import UNet
from app.backend.runs import RunDirectory
from app.backend.schemas import (
    METRIC_COLUMNS,
    RESULT_COLUMNS,
    ExperimentConfig,
    GridSpec,
    PaddingScheme,
    ResultRow,
    RunStatus,
    UNetConfig,
)
from app.backend.services.checkpoints import load_partial_checkpoint
from app.backend.services.dataset import (
    DataSplit,
    InputAssembler,
    WeatherSeries,
    compute_normalization,
    input_channel_count,
    split_ranges,
)
from app.backend.services.forecast import evaluate_horizons, rollout_series
from app.backend.services.plotting import plot_marginal_contribution, plot_results
from app.backend.services.sphere_grid import build_static_channels
from app.backend.services.training import Trainer, finetune_multistep, pretrain, train
from app.backend.storage import store
from config.settings import settings
from data.synthetic import generate_synthetic

logger = logging.getLogger(__name__)

# published totals for the full-scale UNet family, compared as a diagnostic only
REFERENCE_PARAMETER_COUNTS = {
    "unet_4_blocks": 47_152_969,
    "unet_5_blocks": 399_563_977,
    "unet_4_blocks_128": 188_520_649,
    "unet_5_blocks_128": 1_598_034_889,
}
FULL_SCALE_IN_CHANNELS = 147
FULL_SCALE_OUT_CHANNELS = 73

PHASES = ("pretrain", "train", "finetune", "evaluate")


@dataclass
class ExperimentContext:
    config: ExperimentConfig
    series: WeatherSeries
    split: DataSplit
    assembler: InputAssembler
    climatology: Optional[np.ndarray] = None

    @property
    def in_channels(self) -> int:
        return self.assembler.in_channels

    @property
    def out_channels(self) -> int:
        return self.assembler.out_channels


def _set_path(raw: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    node = raw
    for key in path[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[path[-1]] = value


def _flatten(raw: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for key, value in raw.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(_flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def validate_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid experiment config: {problems}") from exc


def _label_value(value: Any) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "-", str(value)).strip("-") or "none"


class ExperimentService:

    # -- configuration ----------------------------------------------------

    def apply_env_overrides(self, raw: Dict[str, Any], env: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
        """``WDS_CFG__optim__lr=0.0005`` sets ``optim.lr``; values parse as YAML scalars."""
        env = os.environ if env is None else env
        prefix = settings.CONFIG_ENV_PREFIX
        for name in sorted(env):
            if not name.startswith(prefix):
                continue
            path = [p for p in name[len(prefix):].split("__") if p]
            if not path:
                continue
            _set_path(raw, path, yaml.safe_load(env[name]))
            logger.info("Config override from %s", name)
        return raw

    def load_config(
        self,
        path: Path,
        env: Optional[Mapping[str, str]] = None,
        run_id: Optional[str] = None,
        seed: Optional[int] = None,
    ) -> ExperimentConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping")
        raw = self.apply_env_overrides(raw, env)
        if run_id is not None:
            raw["run_id"] = run_id
        if seed is not None:
            raw["seed"] = seed
        return validate_config(raw)

    # -- setup ------------------------------------------------------------

    def load_series(self, config: ExperimentConfig) -> WeatherSeries:
        if config.dataset.synthetic is not None:
            return generate_synthetic(config.dataset.synthetic)
        return store.load_series(config.dataset.path)

    def prepare(self, config: ExperimentConfig) -> ExperimentContext:
        series = self.load_series(config)
        split = split_ranges(series.n_times, config.split.fractions)
        stats_range = split.train if config.normalization.stats == "train" else None
        series = series.with_schema(compute_normalization(series, stats_range))
        extras = config.forecast.extras
        static = build_static_channels(series.grid, extras)
        assembler = InputAssembler.for_series(series, config.forecast.n_input_steps, extras, static)
        climatology = None
        if config.evaluation.climatology:
            train_frames = series.normalized()[split.train.start:split.train.stop]
            climatology = train_frames.mean(axis=0)
        return ExperimentContext(config, series, split, assembler, climatology)

    def build(self, ctx: ExperimentContext, skip_connections: Optional[bool] = None) -> nn.Module:
        return build_model(
            ctx.config.model,
            ctx.in_channels,
            ctx.out_channels,
            ctx.series.grid,
            skip_connections=skip_connections,
            seed=ctx.config.seed,
        )

    def trainer(self, ctx: ExperimentContext, model: nn.Module, run_dir: RunDirectory) -> Trainer:
        return Trainer(
            model,
            ctx.series,
            ctx.assembler,
            ctx.config.forecast,
            ctx.config.optim,
            seed=ctx.config.seed,
            train_range=ctx.split.train,
            val_range=ctx.split.val,
            diagnostics_dir=run_dir.diagnostics,
        )

    def open_run(self, config: ExperimentConfig, phase: str, force: bool = False) -> RunDirectory:
        """Run directory for a single phase; a different stored config or an existing phase needs ``force``."""
        run_dir = RunDirectory.for_run(config.run_id)
        if not run_dir.exists():
            return run_dir.create(config)
        stored = run_dir.hash_path.read_text().strip() if run_dir.hash_path.exists() else None
        if stored != config.config_hash():
            if not force:
                raise RunExistsError(f"{run_dir.root} holds a different config (use --force to replace it)")
            return run_dir.create(config, force=True)
        if run_dir.checkpoint(phase).exists() and not force:
            raise RunExistsError(f"{run_dir.root} already has a {phase} checkpoint (use --force)")
        return run_dir

    # -- phases -----------------------------------------------------------

    def _record_history(self, run_dir: RunDirectory, trainer: Trainer, phase: str) -> None:
        run_dir.write_loss_history(phase, trainer.history)
        run_dir.write_validation(phase, trainer.validation)

    def _latest_checkpoint(self, run_dir: RunDirectory, phases: Sequence[str]) -> Path:
        for phase in phases:
            path = run_dir.checkpoint(phase)
            if path.exists():
                return path
        raise CheckpointError(f"{run_dir.root} has none of the checkpoints {list(phases)}")

    def _restore(self, ctx: ExperimentContext, run_dir: RunDirectory, phases: Sequence[str]) -> nn.Module:
        model = self.build(ctx)
        path = self._latest_checkpoint(run_dir, phases)
        model, report = load_partial_checkpoint(model, path)
        if report.reinitialized:
            logger.warning("Restoring %s reinitialized %d tensors", path, len(report.reinitialized))
        return model

    def do_pretrain(self, ctx: ExperimentContext, run_dir: RunDirectory) -> Path:
        cfg = ctx.config.pretrain
        if cfg is None:
            raise ConfigError("config has no pretrain section")
        model = self.build(ctx, skip_connections=cfg.use_skip_connections)
        trainer = self.trainer(ctx, model, run_dir)
        pretrain(trainer, cfg)
        self._record_history(run_dir, trainer, "pretrain")
        return store.save_checkpoint(model, run_dir.checkpoint("pretrain"), {"phase": "pretrain", "objective": cfg.objective})

    def do_train(self, ctx: ExperimentContext, run_dir: RunDirectory, init: Optional[Path] = None, reinit_heads: bool = False) -> Path:
        model = self.build(ctx)
        source = init or (run_dir.checkpoint("pretrain") if run_dir.checkpoint("pretrain").exists() else None)
        if source is not None:
            model, report = load_partial_checkpoint(model, source, reinit_heads=reinit_heads)
            run_dir.write_load_report(report)
        trainer = self.trainer(ctx, model, run_dir)
        train(trainer)
        self._record_history(run_dir, trainer, "train")
        return store.save_checkpoint(model, run_dir.checkpoint("train"), {"phase": "train"})

    def do_finetune(self, ctx: ExperimentContext, run_dir: RunDirectory) -> Path:
        cfg = ctx.config.finetune
        if cfg is None:
            raise ConfigError("config has no finetune section")
        model = self._restore(ctx, run_dir, ["train"])
        trainer = self.trainer(ctx, model, run_dir)
        finetune_multistep(trainer, cfg)
        self._record_history(run_dir, trainer, "finetune")
        return store.save_checkpoint(model, run_dir.checkpoint("finetune"), {"phase": "finetune", "stages": cfg.stages})

    def do_evaluate(self, ctx: ExperimentContext, run_dir: RunDirectory) -> pd.DataFrame:
        model = self._restore(ctx, run_dir, ["finetune", "train"])
        _, frame = evaluate_horizons(
            model,
            ctx.series,
            ctx.assembler,
            ctx.config.forecast,
            ctx.config.evaluation,
            ctx.split.test,
            run_id=ctx.config.run_id,
            climatology=ctx.climatology,
        )
        run_dir.write_metrics(frame)
        plot_results(self.to_results(frame, ctx.config.axis_label), run_dir.plots)
        return frame

    def phase(self, config: ExperimentConfig, phase: str, force: bool = False, **kwargs: Any) -> RunDirectory:
        """Run one pipeline phase against the run directory of ``config``."""
        if phase not in PHASES:
            raise ConfigError(f"unknown phase '{phase}'")
        run_dir = self.open_run(config, phase, force) if phase != "evaluate" else RunDirectory.for_run(config.run_id)
        if phase == "evaluate" and not run_dir.exists():
            raise DataError(f"run directory {run_dir.root} does not exist")
        ctx = self.prepare(config)
        getattr(self, f"do_{phase}")(ctx, run_dir, **kwargs)
        return run_dir

    def run(self, config: ExperimentConfig, force: bool = False) -> RunDirectory:
        """pretrain? -> train -> finetune? -> evaluate, with status tracking."""
        run_dir = RunDirectory.for_run(config.run_id).create(config, force=force)
        status = RunStatus(state="running", phase="setup", config_hash=config.config_hash())
        run_dir.write_status(status)
        try:
            ctx = self.prepare(config)
            phases = [p for p in PHASES if (p != "pretrain" or config.pretrain) and (p != "finetune" or config.finetune)]
            for phase in phases:
                status = status.model_copy(update={"phase": phase})
                run_dir.write_status(status)
                logger.info("Run %s: %s", config.run_id, phase)
                getattr(self, f"do_{phase}")(ctx, run_dir)
        except Exception as exc:
            category = exc.category if isinstance(exc, WeatherDesignError) else "internal"
            run_dir.write_status(
                status.model_copy(update={"state": "failed", "error_category": category, "error": str(exc), "partial": True})
            )
            raise
        run_dir.write_status(status.model_copy(update={"state": "complete", "phase": None}))
        return run_dir

    def export_rollout(self, config: ExperimentConfig, start_index: int, n_steps: int, out: Optional[Path] = None) -> Path:
        run_dir = RunDirectory.for_run(config.run_id)
        ctx = self.prepare(config)
        model = self._restore(ctx, run_dir, ["finetune", "train"])
        predicted = rollout_series(model, ctx.series, ctx.assembler, config.forecast, start_index, n_steps)
        target = Path(out) if out is not None else run_dir.rollout / f"start_{start_index}"
        return store.save_series(predicted, target, recipe={"run_id": config.run_id, "start_index": start_index})

    # -- matrix -----------------------------------------------------------

    def resolve_key(self, base: ExperimentConfig, key: str) -> List[str]:
        """Dotted path for ``key``: exact, or the unique config key ending with it."""
        flat = _flatten(base.model_dump(mode="json"))
        if key in flat or ("." in key and key.split(".")[0] in ExperimentConfig.model_fields):
            return key.split(".")
        matches = [k for k in flat if k.endswith("." + key) or k == key]
        if not matches:
            raise ConfigError(f"'{key}' is not a config key")
        if len(matches) > 1:
            raise ConfigError(f"'{key}' is ambiguous: {sorted(matches)}")
        return matches[0].split(".")

    def matrix_configs(self, base: ExperimentConfig, key: str, values: Sequence[Any]) -> List[ExperimentConfig]:
        """One validated config per value; nothing runs unless every variant validates."""
        if not values:
            raise ConfigError("matrix axis needs at least one value")
        path = self.resolve_key(base, key)
        configs = []
        for value in values:
            raw = base.model_dump(mode="json")
            _set_path(raw, path, value)
            leaf = f"{path[-1]}={_label_value(value)}"
            raw["run_id"] = f"{base.run_id}__{leaf}"
            raw["label"] = leaf
            try:
                configs.append(validate_config(raw))
            except ConfigError as exc:
                raise ConfigError(f"invalid value {value!r} for {'.'.join(path)}: {exc}") from exc
        return configs

    def matrix(self, base: ExperimentConfig, key: str, values: Sequence[Any], force: bool = False) -> List[RunDirectory]:
        configs = self.matrix_configs(base, key, values)
        logger.info("Matrix over %s: %d runs", key, len(configs))
        return [self.run(cfg, force=force) for cfg in configs]

    # -- aggregation ------------------------------------------------------

    def to_results(self, metrics: pd.DataFrame, label: str) -> pd.DataFrame:
        """Long-format result rows (one per run, horizon, metric and channel)."""
        missing = [c for c in METRIC_COLUMNS if c not in metrics.columns]
        extra = [c for c in metrics.columns if c not in METRIC_COLUMNS]
        if missing or extra:
            raise DataError(f"metrics schema mismatch: missing columns {missing}, unexpected columns {extra}")
        long = metrics.melt(
            id_vars=["run_id", "horizon_steps", "channel"], value_vars=["acc", "rmse"], var_name="metric", value_name="value"
        )
        long["label"] = label
        long = long[RESULT_COLUMNS]
        for row in long.itertuples(index=False):
            ResultRow(
                run_id=str(row.run_id),
                label=str(row.label),
                horizon_steps=int(row.horizon_steps),
                metric=str(row.metric),
                value=None if pd.isna(row.value) else float(row.value),
                channel=str(row.channel),
            )
        return long

    def compare(
        self,
        run_dirs: Sequence[Path],
        out: Path,
        default: Optional[str] = None,
        horizon: Optional[int] = None,
    ) -> pd.DataFrame:
        """Merge stored metrics of finished runs; never recomputes anything."""
        if not run_dirs:
            raise DataError("compare needs at least one run directory")
        frames = []
        for root in run_dirs:
            run_dir = RunDirectory(Path(root))
            metrics = run_dir.read_metrics()
            label = run_dir.read_config().axis_label if run_dir.config_path.exists() else run_dir.root.name
            frames.append(self.to_results(metrics, label))
        results = pd.concat(frames, ignore_index=True)
        if results.groupby("label")["run_id"].nunique().max() > 1:
            logger.warning("Run labels are not unique; labelling curves by run_id")
            results["label"] = results["run_id"]
        key = ["run_id", "horizon_steps", "metric", "channel"]
        if results.duplicated(key).any():
            raise DataError("duplicate (run_id, horizon_steps, metric, channel) rows across runs")
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        results.to_csv(out / "results.csv", index=False)
        plot_results(results, out)
        if default is not None:
            self.marginal_contribution(results, default, horizon, out)
        return results

    def marginal_contribution(self, results: pd.DataFrame, default: str, horizon: Optional[int], out: Path) -> pd.DataFrame:
        """metric(run) - metric(default) on the channel mean at one horizon."""
        means = results[results["channel"] == "MEAN"]
        if default not in set(means["run_id"]) | set(means["label"]):
            raise DataError(f"default run '{default}' is not among the compared runs")
        is_default = (means["run_id"] == default) | (means["label"] == default)
        default_label = means.loc[is_default, "label"].iloc[0]
        if horizon is None:
            horizon = int(means["horizon_steps"].max())
        at_h = means[means["horizon_steps"] == horizon]
        if at_h.empty:
            raise DataError(f"no rows at horizon {horizon}")
        table = at_h.pivot_table(index="label", columns="metric", values="value", aggfunc="first")
        bars = table.drop(index=default_label) - table.loc[default_label]
        bars.to_csv(out / "marginal.csv")
        for metric in bars.columns:
            plot_marginal_contribution(bars[metric], metric, horizon, default_label, out / f"marginal_{metric}.png")
        return bars

    # -- parameter accounting ---------------------------------------------

    def grid_and_channels(self, config: ExperimentConfig) -> tuple:
        recipe = config.dataset.synthetic
        if recipe is not None:
            return GridSpec.regular(recipe.n_lat, recipe.n_lon, recipe.include_poles), recipe.n_channels
        manifest = store.read_manifest(config.dataset.path)
        return GridSpec(lats=tuple(manifest.lats), lons=tuple(manifest.lons)), len(manifest.channels)

    def count_params(self, config: ExperimentConfig) -> pd.DataFrame:
        """Exact counts for the configured model and the full-scale UNet diagnostics."""
        grid, n_channels = self.grid_and_channels(config)
        f = config.forecast
        in_channels = input_channel_count(n_channels, f.n_input_steps, f.extras)
        rows = [{
            "model": f"configured ({config.model.name})",
            "parameters": count_parameters(build_model(config.model, in_channels, n_channels, grid, seed=config.seed)),
            "reference": None,
        }]
        for name, (n_blocks, width) in {
            "unet_4_blocks": (4, 64),
            "unet_5_blocks": (5, 64),
            "unet_4_blocks_128": (4, 128),
            "unet_5_blocks_128": (5, 128),
        }.items():
            cfg = UNetConfig(
                n_blocks=n_blocks,
                base_width=width,
                in_channels=FULL_SCALE_IN_CHANNELS,
                out_channels=FULL_SCALE_OUT_CHANNELS,
                padding=PaddingScheme(),
            )
            with torch.device("meta"):
                count = count_parameters(UNet(cfg))
            rows.append({"model": name, "parameters": count, "reference": REFERENCE_PARAMETER_COUNTS[name]})
        return pd.DataFrame(rows)


experiment_service = ExperimentService()