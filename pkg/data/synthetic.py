"""Synthetic datasets with known dynamics, used as a desk-scale stand-in for reanalysis data.

Run ``python -m data.synthetic`` to write the default recipe to ``DATA_DIR``.
"""

import logging
from datetime import timedelta
from typing import Callable, Dict

import numpy as np

from app.backend.errors import DataError
from app.backend.schemas import ChannelSchema, GridSpec, SyntheticRecipe
from app.backend.services.dataset import WeatherSeries, compute_normalization

logger = logging.getLogger(__name__)


def _smooth_field(grid: GridSpec, rng: np.random.Generator, n_modes: int) -> np.ndarray:
    """Sum of low zonal wavenumbers with cos(lat)^k envelopes; smooth at poles and the seam."""
    lat = np.deg2rad(grid.lat_array())[:, None]
    lon = np.deg2rad(grid.lon_array())[None, :]
    k_max = max(1, grid.n_lon // 4)
    field = rng.normal() * np.sin(lat) * np.ones_like(lon)
    for mode in range(n_modes):
        k = int(rng.integers(1, k_max + 1))
        amp = rng.normal() / (mode + 1)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field = field + amp * np.cos(lat) ** k * np.cos(k * lon + phase)
    return field


def _base_frame(recipe: SyntheticRecipe, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    frame = np.empty((recipe.n_channels, grid.n_lat, grid.n_lon), dtype=np.float64)
    for c in range(recipe.n_channels):
        offset = rng.normal(0.0, 5.0)
        scale = rng.uniform(0.5, 3.0)
        frame[c] = offset + scale * _smooth_field(grid, rng, recipe.n_modes)
    return frame


def _shift_columns(frame: np.ndarray, shift: float) -> np.ndarray:
    if float(shift).is_integer():
        return np.roll(frame, int(shift), axis=-1)
    n_lon = frame.shape[-1]
    k = np.fft.rfftfreq(n_lon, d=1.0 / n_lon)
    spectrum = np.fft.rfft(frame, axis=-1) * np.exp(-2j * np.pi * k * shift / n_lon)
    return np.fft.irfft(spectrum, n=n_lon, axis=-1)


def solid_rotation_advection(recipe: SyntheticRecipe, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Frame t is frame 0 rotated eastward by ``t * shift_columns`` grid columns."""
    frame0 = _base_frame(recipe, grid, rng).astype(np.float32)
    return np.stack([_shift_columns(frame0, t * recipe.shift_columns) for t in range(recipe.n_times)])


def diffusive_waves(recipe: SyntheticRecipe, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Travelling zonal waves that decay with rate diffusivity*k^2 over a steady background."""
    lat = np.deg2rad(grid.lat_array())[:, None]
    lon = np.deg2rad(grid.lon_array())[None, :]
    k_max = max(1, grid.n_lon // 4)
    times = np.arange(recipe.n_times, dtype=np.float64)[:, None, None]
    out = np.empty((recipe.n_times, recipe.n_channels, grid.n_lat, grid.n_lon), dtype=np.float64)
    for c in range(recipe.n_channels):
        background = rng.normal(0.0, 5.0) + _smooth_field(grid, rng, 1)
        field = np.broadcast_to(background, (recipe.n_times, grid.n_lat, grid.n_lon)).copy()
        for mode in range(recipe.n_modes):
            k = int(rng.integers(1, k_max + 1))
            amp = rng.uniform(0.5, 2.0) / (mode + 1)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            decay = np.exp(-recipe.diffusivity * k**2 * times)
            field += amp * decay * np.cos(lat) ** k * np.cos(k * (lon - recipe.wave_speed * times) + phase)
        out[:, c] = field
    return out


def persistence_plus_noise(recipe: SyntheticRecipe, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """AR(1) process x_t = persistence * x_{t-1} + noise_std * smooth noise."""
    state = _base_frame(recipe, grid, rng)
    frames = [state]
    for _ in range(1, recipe.n_times):
        noise = np.stack([_smooth_field(grid, rng, recipe.n_modes) for _ in range(recipe.n_channels)])
        state = recipe.persistence * state + recipe.noise_std * noise
        frames.append(state)
    return np.stack(frames)


GENERATORS: Dict[str, Callable[[SyntheticRecipe, GridSpec, np.random.Generator], np.ndarray]] = {
    "solid_rotation_advection": solid_rotation_advection,
    "diffusive_waves": diffusive_waves,
    "persistence_plus_noise": persistence_plus_noise,
}


def generate_synthetic(recipe: SyntheticRecipe) -> WeatherSeries:
    if recipe.kind not in GENERATORS:
        raise DataError(f"unknown synthetic kind '{recipe.kind}' (known: {sorted(GENERATORS)})")
    grid = GridSpec.regular(recipe.n_lat, recipe.n_lon, include_poles=recipe.include_poles)
    rng = np.random.default_rng(recipe.seed)
    data = GENERATORS[recipe.kind](recipe, grid, rng).astype(np.float32)
    step = timedelta(hours=recipe.dt_hours)
    timestamps = tuple(recipe.start + t * step for t in range(recipe.n_times))
    raw = WeatherSeries(grid=grid, schema=ChannelSchema.default(recipe.n_channels), timestamps=timestamps, data=data)
    schema = compute_normalization(raw)
    logger.info("Generated %s series %s", recipe.kind, tuple(data.shape))
    return raw.with_schema(schema)


if __name__ == "__main__":
    from app.backend.storage import store
    from config.logging import setup_logging
    from config.settings import settings

    setup_logging()
    default = SyntheticRecipe(kind="solid_rotation_advection")
    target = settings.DATA_DIR / default.kind
    store.save_series(generate_synthetic(default), target, recipe=default.model_dump(mode="json"))
    print(f"Synthetic dataset written to {target}")
