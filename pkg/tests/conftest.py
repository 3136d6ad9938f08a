from typing import Any, Dict

import pytest
import torch
from torch import nn

from app.backend.schemas import ExtrasConfig, ForecastConfig, GridSpec, LossConfig, SyntheticRecipe
from config.settings import settings
from data.synthetic import generate_synthetic


class ConstantResidual(nn.Module):
    """Outputs ``value`` everywhere on the first ``out_channels`` channels; Jacobian is zero."""

    def __init__(self, out_channels: int, value: float = 0.0):
        super().__init__()
        self.out_channels = out_channels
        self.weight = nn.Parameter(torch.tensor(1.0))
        self.value = value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x[:, : self.out_channels] * 0.0 + self.weight * 0.0 + self.value


class ColumnShift(nn.Module):
    """Exact solid-rotation operator: rolls the newest dynamic step east by one column."""

    def __init__(self, out_channels: int, shift: int = 1):
        super().__init__()
        self.out_channels = out_channels
        self.shift = shift

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.roll(x[:, : self.out_channels], self.shift, dims=-1)


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "RUNS_DIR", tmp_path / "runs")
    monkeypatch.setattr(settings, "DATA_DIR", tmp_path / "datasets")
    return tmp_path


@pytest.fixture
def grid() -> GridSpec:
    return GridSpec.regular(8, 16)


@pytest.fixture
def rotation_series():
    recipe = SyntheticRecipe(kind="solid_rotation_advection", n_lat=8, n_lon=16, n_times=40, n_channels=2, seed=3)
    return generate_synthetic(recipe)


@pytest.fixture
def plain_forecast() -> ForecastConfig:
    return ForecastConfig(
        formulation="delta",
        extras=ExtrasConfig(zenith=False, coords=False),
        loss=LossConfig(kind="mse"),
    )


@pytest.fixture
def minimal_raw() -> Dict[str, Any]:
    """Smallest experiment that exercises every phase in seconds on a CPU."""
    return {
        "run_id": "tiny",
        "seed": 0,
        "dataset": {
            "synthetic": {"kind": "solid_rotation_advection", "n_lat": 8, "n_lon": 16, "n_times": 24, "n_channels": 2}
        },
        "model": {"name": "unet", "n_blocks": 2, "base_width": 4, "padding": {"x_mode": "circular", "y_mode": "reflect"}},
        "forecast": {
            "formulation": "delta",
            "extras": {"zenith": True, "coords": True, "masks": ["land_sea"]},
            "loss": {"kind": "geo_mse"},
        },
        "optim": {"lr": 0.001, "epochs": 1, "batch_size": 4},
        "evaluation": {"horizons": [1, 2]},
    }
