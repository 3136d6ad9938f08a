import math

import numpy as np
import pytest
import torch
from conftest import ConstantResidual

from app.backend.errors import ConfigError, DataError, DivergenceError
from app.backend.models.unet import build_unet
from app.backend.schemas import (
    EvaluationConfig,
    ExtrasConfig,
    FinetuneConfig,
    ForecastConfig,
    LossConfig,
    NoiseConfig,
    OptimConfig,
    PretrainConfig,
    SyntheticRecipe,
    UNetConfig,
)
from app.backend.services.dataset import InputAssembler
from app.backend.services.forecast import evaluate_horizons, rollout
from app.backend.services.sphere_grid import build_static_channels
from app.backend.services.training import (
    Trainer,
    build_optimizer,
    cosine_lr,
    discount_weights,
    finetune_multistep,
    masked_channel_count,
    pretrain,
    sample_channel_mask,
    scheduled_sampling_weights,
    train,
)
from data.synthetic import generate_synthetic


def _unet(in_channels, out_channels=2, seed=0):
    cfg = UNetConfig(n_blocks=2, base_width=4, in_channels=in_channels, out_channels=out_channels)
    return build_unet(cfg, seed=seed)


def _trainer(series, forecast, optim=None, seed=0, model=None, **kwargs):
    assembler = InputAssembler.for_series(
        series, forecast.n_input_steps, forecast.extras, build_static_channels(series.grid, forecast.extras)
    )
    if model is None:
        model = _unet(assembler.in_channels, assembler.out_channels, seed)
    optim = optim or OptimConfig(lr=1e-3, epochs=1, batch_size=4)
    return Trainer(model, series, assembler, forecast, optim, seed=seed, **kwargs)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 0.001) == pytest.approx(0.001)
    assert cosine_lr(50, 100, 0.001) == pytest.approx(0.0005)
    assert cosine_lr(100, 100, 0.001) == pytest.approx(0.0, abs=1e-15)


def test_cosine_schedule_errors():
    with pytest.raises(ConfigError):
        cosine_lr(0, 0, 0.001)
    with pytest.raises(ConfigError):
        cosine_lr(11, 10, 0.001)


def test_discount_weights():
    weights = discount_weights(3, 0.9)
    assert weights == pytest.approx([1.0, 0.9, 0.81])
    assert sum(weights) == pytest.approx(sum(0.9**i for i in range(3)), abs=1e-15)


def test_scheduled_sampling_weights():
    assert scheduled_sampling_weights(10) == pytest.approx([0.1 * (e + 1) for e in range(10)])


def test_masked_channel_count():
    assert masked_channel_count(8, 0.5) == 4
    assert masked_channel_count(73, 0.5) == 36
    with pytest.raises(ConfigError):
        masked_channel_count(1, 0.5)


def test_channel_mask_rows():
    mask = sample_channel_mask(16, 8, 0.5, torch.Generator().manual_seed(0))
    assert mask.shape == (16, 8)
    assert mask.sum(dim=1).tolist() == [4] * 16
    assert len({tuple(row.tolist()) for row in mask}) > 1


def test_weight_decay_is_decoupled():
    layer = torch.nn.Linear(4, 4)
    before = layer.weight.detach().clone()
    optimizer = build_optimizer(layer, OptimConfig(lr=0.01, weight_decay=0.1))
    for _ in range(3):
        for p in layer.parameters():
            p.grad = torch.zeros_like(p)
        optimizer.step()
    assert torch.allclose(layer.weight, before * (1.0 - 0.01 * 0.1) ** 3, atol=1e-7)


def test_last_step_supervision_reaches_trunk(rotation_series, plain_forecast):
    trainer = _trainer(rotation_series, plain_forecast)
    windows = trainer.windows(rollout_steps=2)[:4]
    history, truth, times = trainer.inputs(windows, perturb=False)
    result = rollout(trainer.model, history, times, 2, trainer.assembler, "delta", trainer.step_delta)
    ((result.states[-1] - truth[1]) ** 2).mean().backward()
    assert trainer.model.stem.conv.weight.grad.norm().item() > 0.0


def test_noise_touches_dynamic_channels_only(rotation_series):
    forecast = ForecastConfig(
        formulation="delta",
        extras=ExtrasConfig(zenith=True, coords=True, masks=["land_sea"]),
        noise=NoiseConfig(kind="perlin", amplitude=0.5, lattice=(2, 4)),
        loss=LossConfig(kind="mse"),
    )
    trainer = _trainer(rotation_series, forecast)
    batch = trainer.windows()[:3]
    noisy, _, times = trainer.inputs(batch, perturb=True)
    clean, _, _ = trainer.inputs(batch, perturb=False)
    x_noisy = trainer.assembler(noisy, times)
    x_clean = trainer.assembler(clean, times)
    dynamic = trainer.assembler.dynamic_channels
    assert not torch.equal(x_noisy[:, dynamic], x_clean[:, dynamic])
    assert torch.equal(x_noisy[:, dynamic.stop:], x_clean[:, dynamic.stop:])


def test_training_history_and_validation(rotation_series, plain_forecast):
    trainer = _trainer(rotation_series, plain_forecast, train_range=range(0, 28), val_range=range(28, 34))
    result = train(trainer, epochs=2)
    per_epoch = math.ceil(len(trainer.windows()) / 4)
    assert len(result.history) == 2 * per_epoch
    assert [row["epoch"] for row in result.validation] == [0, 1]
    for row in result.validation:
        assert row["val_rmse"] > 0.0 and np.isfinite(row["val_loss"])
        assert -1.0 <= row["val_acc"] <= 1.0
    assert result.history[0]["lr"] == pytest.approx(1e-3)
    assert all(np.isfinite(row["loss"]) for row in result.history)


def test_gradient_accumulation_counts_optimizer_steps(rotation_series, plain_forecast):
    optim = OptimConfig(lr=1e-3, epochs=1, batch_size=2, effective_batch_size=8, steps_per_epoch=3)
    trainer = _trainer(rotation_series, plain_forecast, optim=optim)
    result = train(trainer)
    assert [row["step"] for row in result.history] == [0, 1, 2]


def test_training_is_reproducible(rotation_series, plain_forecast):
    first = train(_trainer(rotation_series, plain_forecast, seed=3), epochs=2).history
    second = train(_trainer(rotation_series, plain_forecast, seed=3), epochs=2).history
    assert [r["loss"] for r in first] == pytest.approx([r["loss"] for r in second], abs=1e-6)


def test_divergence_writes_snapshot(rotation_series, plain_forecast, tmp_path):
    model = ConstantResidual(2, float("nan"))
    trainer = _trainer(rotation_series, plain_forecast, model=model, diagnostics_dir=tmp_path / "diag")
    with pytest.raises(DivergenceError):
        train(trainer)
    snapshot = torch.load(tmp_path / "diag" / "divergence.pt", weights_only=True)
    assert snapshot["batch_indices"] and "parameters" in snapshot


def test_masked_autoencoder_pretraining(rotation_series, plain_forecast):
    trainer = _trainer(rotation_series, plain_forecast)
    result = pretrain(trainer, PretrainConfig(objective="masked_autoencoder", mask_ratio=0.5, epochs=1))
    assert result.history and all(row["phase"] == "pretrain" for row in result.history)


def test_masked_autoencoder_needs_a_masked_channel(rotation_series, plain_forecast):
    with pytest.raises(ConfigError):
        pretrain(_trainer(rotation_series, plain_forecast), PretrainConfig(objective="masked_autoencoder", mask_ratio=0.2))


class OutputRecorder(torch.nn.Module):
    """Keeps every output with its gradient so the loss wiring can be inspected."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.outputs = []

    def forward(self, x):
        out = self.inner(x)
        out.retain_grad()
        self.outputs.append(out)
        return out


def test_masked_autoencoder_ignores_visible_channels(rotation_series, plain_forecast):
    trainer = _trainer(rotation_series, plain_forecast, optim=OptimConfig(lr=1e-3, epochs=1, batch_size=4, steps_per_epoch=1))
    recorder = trainer.model = OutputRecorder(trainer.model)
    pretrain(trainer, PretrainConfig(objective="masked_autoencoder", mask_ratio=0.5, epochs=1))
    (pred,) = recorder.outputs
    touched = pred.grad.flatten(2).abs().amax(dim=2) > 0.0
    # one of the two channels is masked per sample; only it carries gradient
    assert touched.sum(dim=1).tolist() == [1] * pred.shape[0]


def test_denoising_with_zero_noise_is_the_autoencoder(rotation_series, plain_forecast):
    auto = pretrain(_trainer(rotation_series, plain_forecast), PretrainConfig(objective="autoencoder", epochs=1))
    dae = pretrain(
        _trainer(rotation_series, plain_forecast),
        PretrainConfig(objective="denoising_autoencoder", dae_noise_std=0.0, epochs=1),
    )
    assert [r["loss"] for r in auto.history] == pytest.approx([r["loss"] for r in dae.history], abs=1e-7)


def test_finetune_stages(rotation_series, plain_forecast):
    trainer = _trainer(rotation_series, plain_forecast)
    cfg = FinetuneConfig(stages=[2, 3], supervision="intermediate", scheduled_sampling=True, epochs_per_stage=2)
    result = finetune_multistep(trainer, cfg)
    assert {row["stage"] for row in result.history} == {2, 3}
    assert all(row["phase"] == "finetune" for row in result.history)


def test_finetune_stage_longer_than_series(rotation_series, plain_forecast):
    with pytest.raises(DataError):
        finetune_multistep(_trainer(rotation_series, plain_forecast), FinetuneConfig(stages=[64]))


@pytest.mark.slow
def test_tiny_unet_overfits():
    recipe = SyntheticRecipe(kind="solid_rotation_advection", n_lat=8, n_lon=16, n_times=17, n_channels=2)
    series = generate_synthetic(recipe)
    forecast = ForecastConfig(formulation="delta", extras=ExtrasConfig(zenith=False, coords=False), loss=LossConfig(kind="mse"))
    trainer = _trainer(series, forecast, optim=OptimConfig(lr=3e-3, epochs=5, batch_size=4, steps_per_epoch=40))
    history = train(trainer).history
    averages = [np.mean([r["loss"] for r in history if r["epoch"] == e]) for e in range(5)]
    assert averages[-1] < averages[0]


REPLICATION_SEEDS = range(5)


@pytest.mark.slow
def test_delta_beats_direct_on_persistent_data():
    wins = 0
    for seed in REPLICATION_SEEDS:
        recipe = SyntheticRecipe(
            kind="persistence_plus_noise", n_lat=8, n_lon=16, n_times=80, n_channels=2, persistence=0.98, seed=seed
        )
        series = generate_synthetic(recipe)
        val_losses = {}
        for formulation in ("delta", "direct"):
            forecast = ForecastConfig(
                formulation=formulation, extras=ExtrasConfig(zenith=False, coords=False), loss=LossConfig(kind="mse")
            )
            trainer = _trainer(
                series, forecast, optim=OptimConfig(lr=1e-3, epochs=3, batch_size=4), seed=seed,
                train_range=range(0, 60), val_range=range(60, 80),
            )
            val_losses[formulation] = train(trainer).validation[-1]["val_loss"]
        wins += val_losses["delta"] < val_losses["direct"]
    assert wins >= 4


@pytest.mark.slow
def test_finetuning_improves_long_rollouts():
    forecast = ForecastConfig(formulation="delta", extras=ExtrasConfig(zenith=False, coords=False), loss=LossConfig(kind="mse"))
    evaluation = EvaluationConfig(horizons=[4])
    wins = 0
    for seed in REPLICATION_SEEDS:
        recipe = SyntheticRecipe(kind="solid_rotation_advection", n_lat=8, n_lon=16, n_times=40, n_channels=2, seed=seed)
        series = generate_synthetic(recipe)
        trainer = _trainer(series, forecast, optim=OptimConfig(lr=2e-3, epochs=3, batch_size=4), seed=seed)
        train(trainer)
        before, _ = evaluate_horizons(trainer.model, series, trainer.assembler, forecast, evaluation, range(40))
        finetune_multistep(trainer, FinetuneConfig(stages=[2, 4], epochs_per_stage=3))
        after, _ = evaluate_horizons(trainer.model, series, trainer.assembler, forecast, evaluation, range(40))
        wins += after[0].rmse_mean < before[0].rmse_mean
    assert wins >= 4
