"""Optimization loop, pretraining objectives and multi-step fine-tuning."""

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from app.backend.errors import ConfigError, DataError, DivergenceError
from app.backend.schemas import FinetuneConfig, ForecastConfig, OptimConfig, PretrainConfig
from app.backend.services.dataset import (
    InputAssembler,
    SampleWindow,
    WeatherSeries,
    gather_steps,
    last_input_times,
    make_windows,
    windows_in,
)
from app.backend.services.forecast import horizon_delta, rollout, step
from app.backend.services.objectives import loss, masked_loss, metric_acc, metric_rmse
from app.backend.services.perturb import NoiseSampler
from app.backend.services.sphere_grid import quadrature_weights
from config.settings import settings

logger = logging.getLogger(__name__)

BatchLoss = Callable[[Sequence[SampleWindow], int], torch.Tensor]


def configure_torch() -> None:
    if settings.TORCH_THREADS:
        torch.set_num_threads(settings.TORCH_THREADS)
    if settings.DETERMINISTIC:
        torch.use_deterministic_algorithms(True, warn_only=True)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """0.5 * lr0 * (1 + cos(pi * step / total_steps)), reaching 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("cosine schedule needs total_steps >= 1")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def build_optimizer(model: nn.Module, optim: OptimConfig, lr: Optional[float] = None) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=lr if lr is not None else optim.lr,
        betas=optim.betas,
        eps=optim.eps,
        weight_decay=optim.weight_decay,
    )


def discount_weights(n_steps: int, gamma: float) -> List[float]:
    """w_i = gamma^(i-1) for i = 1..n_steps."""
    weights, w = [], 1.0
    for _ in range(n_steps):
        weights.append(w)
        w *= gamma
    return weights


def scheduled_sampling_weights(n_epochs: int) -> List[float]:
    """Prediction weight (e + 1) / n_epochs at 0-based epoch e."""
    return [(e + 1) / n_epochs for e in range(n_epochs)]


def masked_channel_count(n_channels: int, ratio: float) -> int:
    count = math.floor(ratio * n_channels)
    if count < 1:
        raise ConfigError(f"mask_ratio {ratio} masks no channel out of {n_channels}")
    return count


def sample_channel_mask(batch: int, n_channels: int, ratio: float, generator: torch.Generator) -> torch.Tensor:
    """[B, C] boolean mask with floor(ratio * C) channels set per sample."""
    count = masked_channel_count(n_channels, ratio)
    mask = torch.zeros(batch, n_channels, dtype=torch.bool)
    for b in range(batch):
        mask[b, torch.randperm(n_channels, generator=generator)[:count]] = True
    return mask


@dataclass
class TrainResult:
    model: nn.Module
    history: List[dict] = field(default_factory=list)
    validation: List[dict] = field(default_factory=list)


class Trainer:
    """Single-process optimizer loop shared by training, pretraining and fine-tuning."""

    def __init__(
        self,
        model: nn.Module,
        series: WeatherSeries,
        assembler: InputAssembler,
        forecast: ForecastConfig,
        optim: OptimConfig,
        seed: int = 0,
        train_range: Optional[range] = None,
        val_range: Optional[range] = None,
        diagnostics_dir: Optional[Path] = None,
    ):
        self.device = torch.device(settings.DEVICE)
        self.model = model.to(self.device)
        self.series = series
        self.assembler = assembler
        self.forecast = forecast
        self.optim = optim
        self.seed = seed
        self.train_range = train_range if train_range is not None else range(series.n_times)
        self.val_range = val_range
        self.diagnostics_dir = diagnostics_dir
        self.data = series.normalized_tensor(str(self.device))
        self.weights = torch.as_tensor(np.array(quadrature_weights(series.grid)), device=self.device)
        self.step_delta = horizon_delta(series, forecast)
        self.noise = NoiseSampler(forecast.noise, seed=forecast.noise.seed + seed)
        self.generator = torch.Generator().manual_seed(seed)
        self.history: List[dict] = []
        self.validation: List[dict] = []

    # -- data -------------------------------------------------------------

    def windows(self, rollout_steps: int = 1, indices: Optional[range] = None) -> List[SampleWindow]:
        f = self.forecast
        try:
            windows = make_windows(self.series, f.n_input_steps, f.horizon_steps, f.input_stride, rollout_steps)
        except DataError as exc:
            raise DataError(f"{rollout_steps}-step windows do not fit the series: {exc}") from exc
        selected = windows_in(windows, indices if indices is not None else self.train_range)
        if not selected:
            raise DataError(f"no {rollout_steps}-step windows inside split {indices or self.train_range}")
        return selected

    def steps_per_epoch(self, n_windows: int) -> int:
        if self.optim.steps_per_epoch is not None:
            return self.optim.steps_per_epoch
        micro_batches = math.ceil(n_windows / self.optim.batch_size)
        return max(1, micro_batches // self.optim.accumulation_steps)

    def micro_batches(self, windows: Sequence[SampleWindow], epoch: int, phase_seed: int) -> Iterator[List[SampleWindow]]:
        """Deterministically shuffled batches, reshuffling whenever a pass is exhausted."""
        size = self.optim.batch_size
        for n_pass in itertools.count():
            rng = np.random.default_rng([self.seed, phase_seed, epoch, n_pass])
            order = rng.permutation(len(windows))
            for start in range(0, len(order), size):
                yield [windows[i] for i in order[start:start + size]]

    def inputs(self, batch: Sequence[SampleWindow], perturb: bool = True):
        history, truth = gather_steps(self.data, batch)
        if perturb and self.noise.active:
            history = [self.noise(x) for x in history]
        return history, truth, last_input_times(self.series, batch)

    # -- losses -----------------------------------------------------------

    def one_step(self, batch: Sequence[SampleWindow], perturb: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        """Single-step prediction and its target, both [B, C, H, W]."""
        history, truth, times = self.inputs(batch, perturb)
        pred = step(self.model, self.assembler(history, times), history[-1], self.forecast.formulation)
        self.check_finite(pred, batch)
        return pred, truth[0]

    def supervised_loss(self, batch: Sequence[SampleWindow], epoch: int, perturb: bool = True) -> torch.Tensor:
        pred, target = self.one_step(batch, perturb)
        return loss(pred, target, self.forecast.loss, self.weights)

    def validation_scores(self) -> Optional[dict]:
        """Mean loss plus area-weighted RMSE and ACC (normalized units) on the validation split."""
        if self.val_range is None or len(self.val_range) == 0:
            return None
        try:
            windows = self.windows(indices=self.val_range)
        except DataError:
            return None
        self.model.eval()
        total = 0.0
        preds, targets = [], []
        with torch.no_grad():
            for start in range(0, len(windows), self.optim.batch_size):
                batch = windows[start:start + self.optim.batch_size]
                pred, target = self.one_step(batch, perturb=False)
                total += float(loss(pred, target, self.forecast.loss, self.weights)) * len(batch)
                preds.append(pred)
                targets.append(target)
        self.model.train()
        pred, target = torch.cat(preds), torch.cat(targets)
        return {
            "val_loss": total / len(windows),
            "val_rmse": metric_rmse(pred, target, self.weights).mean,
            "val_acc": metric_acc(pred, target, self.weights).mean,
        }

    # -- loop -------------------------------------------------------------

    def check_finite(self, value: torch.Tensor, batch: Sequence[SampleWindow], epoch: int = -1, opt_step: int = -1) -> None:
        if torch.isfinite(value).all():
            return
        snapshot = None
        if self.diagnostics_dir is not None:
            self.diagnostics_dir.mkdir(parents=True, exist_ok=True)
            snapshot = self.diagnostics_dir / "divergence.pt"
            torch.save(
                {
                    "parameters": {k: v.detach().cpu() for k, v in self.model.state_dict().items()},
                    "batch_indices": [list(w.indices) for w in batch],
                    "epoch": epoch,
                    "step": opt_step,
                },
                snapshot,
            )
        raise DivergenceError(f"non-finite values during training (snapshot: {snapshot})")

    def fit(
        self,
        batch_loss: BatchLoss,
        windows: Sequence[SampleWindow],
        epochs: int,
        phase: str,
        stage: Optional[int] = None,
        lr: Optional[float] = None,
        validate: bool = True,
    ) -> None:
        """Run ``epochs`` with a fresh optimizer and cosine schedule."""
        lr0 = lr if lr is not None else self.optim.lr
        per_epoch = self.steps_per_epoch(len(windows))
        total = epochs * per_epoch
        optimizer = build_optimizer(self.model, self.optim, lr0)
        accumulation = self.optim.accumulation_steps
        phase_seed = sum(ord(ch) for ch in phase) * 1000 + (stage or 0)
        self.model.train()
        global_step = 0
        for epoch in range(epochs):
            batches = self.micro_batches(windows, epoch, phase_seed)
            epoch_losses = []
            for _ in range(per_epoch):
                current_lr = cosine_lr(global_step, total, lr0)
                for group in optimizer.param_groups:
                    group["lr"] = current_lr
                optimizer.zero_grad(set_to_none=True)
                step_loss = 0.0
                for _ in range(accumulation):
                    batch = next(batches)
                    value = batch_loss(batch, epoch)
                    self.check_finite(value, batch, epoch, global_step)
                    (value / accumulation).backward()
                    step_loss += float(value.detach()) / accumulation
                optimizer.step()
                self.history.append(
                    {"phase": phase, "stage": stage, "epoch": epoch, "step": global_step, "loss": step_loss, "lr": current_lr}
                )
                epoch_losses.append(step_loss)
                global_step += 1
            scores = self.validation_scores() if validate else None
            if scores is not None:
                self.validation.append({"phase": phase, "stage": stage, "epoch": epoch, **scores})
            logger.info(
                "%s%s epoch %d/%d: loss %.6f%s",
                phase,
                "" if stage is None else f"[{stage}]",
                epoch + 1,
                epochs,
                float(np.mean(epoch_losses)),
                "" if scores is None else f", val {scores['val_loss']:.6f} rmse {scores['val_rmse']:.4f}",
            )

    def result(self) -> TrainResult:
        return TrainResult(model=self.model, history=self.history, validation=self.validation)


def train(trainer: Trainer, epochs: Optional[int] = None) -> TrainResult:
    """Single-step supervised training on the configured formulation, loss and extras."""
    windows = trainer.windows()
    trainer.fit(trainer.supervised_loss, windows, epochs or trainer.optim.epochs, phase="train")
    return trainer.result()


def pretrain(trainer: Trainer, cfg: PretrainConfig) -> TrainResult:
    """Pretrain with one of the reconstruction objectives (or plain supervision).

    Reconstruction objectives target the clean newest input step.
    """
    if cfg.objective == "supervised":
        windows = trainer.windows()
        trainer.fit(trainer.supervised_loss, windows, cfg.epochs or trainer.optim.epochs, phase="pretrain", validate=False)
        return trainer.result()

    n_channels = trainer.series.n_channels
    if cfg.objective == "masked_autoencoder":
        masked_channel_count(n_channels, cfg.mask_ratio)
    objective_loss = trainer.forecast.loss

    def reconstruction_loss(batch: Sequence[SampleWindow], epoch: int) -> torch.Tensor:
        history, _, times = trainer.inputs(batch, perturb=False)
        target = history[-1]
        if cfg.objective == "masked_autoencoder":
            mask = sample_channel_mask(len(batch), n_channels, cfg.mask_ratio, trainer.generator).to(target.device)
            keep = (~mask).to(target.dtype)[..., None, None]
            pred = trainer.model(trainer.assembler([x * keep for x in history], times))
            trainer.check_finite(pred, batch)
            return masked_loss(pred, target, mask, objective_loss, trainer.weights)
        if cfg.objective == "denoising_autoencoder" and cfg.dae_noise_std > 0.0:
            history = [
                x + cfg.dae_noise_std * torch.randn(x.shape, generator=trainer.generator, dtype=x.dtype).to(x.device)
                for x in history
            ]
        pred = trainer.model(trainer.assembler(history, times))
        trainer.check_finite(pred, batch)
        return loss(pred, target, objective_loss, trainer.weights)

    windows = trainer.windows()
    trainer.fit(reconstruction_loss, windows, cfg.epochs or trainer.optim.epochs, phase="pretrain", validate=False)
    return trainer.result()


def finetune_multistep(trainer: Trainer, cfg: FinetuneConfig) -> TrainResult:
    """Sequential stages of K-step rollouts with gradients through the whole trajectory."""
    lr = cfg.lr if cfg.lr is not None else trainer.optim.lr
    sampling = scheduled_sampling_weights(cfg.epochs_per_stage)
    for n_steps in cfg.stages:
        weights = discount_weights(n_steps, cfg.gamma)
        windows = trainer.windows(rollout_steps=n_steps)

        def rollout_loss(batch: Sequence[SampleWindow], epoch: int, n_steps: int = n_steps, weights=weights) -> torch.Tensor:
            history, truth, times = trainer.inputs(batch)
            mixing = cfg.scheduled_sampling and cfg.supervision == "intermediate"
            result = rollout(
                trainer.model,
                history,
                times,
                n_steps,
                trainer.assembler,
                trainer.forecast.formulation,
                trainer.step_delta,
                truth=truth if mixing else None,
                prediction_weight=sampling[epoch] if mixing else 1.0,
            )
            trainer.check_finite(result.states[-1], batch)
            if cfg.supervision == "last_step":
                return loss(result.states[-1], truth[n_steps - 1], trainer.forecast.loss, trainer.weights)
            terms = [
                w * loss(state, target, trainer.forecast.loss, trainer.weights)
                for w, state, target in zip(weights, result.states, truth)
            ]
            return torch.stack(terms).sum()

        trainer.fit(rollout_loss, windows, cfg.epochs_per_stage, phase="finetune", stage=n_steps, lr=lr)
    return trainer.result()
