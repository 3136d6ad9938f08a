"""Time-indexed field storage, normalization, windowing and input assembly."""

import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.backend.errors import ConfigError, DataError, ShapeError
from app.backend.schemas import ChannelSchema, ExtrasConfig, GridSpec
from app.backend.services.sphere_grid import StaticChannelSet, solar_zenith_cos, zenith_stats
from config.settings import settings

logger = logging.getLogger(__name__)

IndexRange = Union[range, slice, Tuple[int, int]]


@dataclass(frozen=True)
class WeatherSeries:
    grid: GridSpec
    schema: ChannelSchema
    timestamps: Tuple[datetime, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ShapeError(f"series data must be [T, C, H, W], got shape {data.shape}")
        n_times, n_channels, n_lat, n_lon = data.shape
        if n_channels != self.schema.n_channels:
            raise ShapeError(f"data has {n_channels} channels, schema has {self.schema.n_channels}")
        if (n_lat, n_lon) != self.grid.shape:
            raise ShapeError(f"data grid {(n_lat, n_lon)} does not match GridSpec {self.grid.shape}")
        if n_times != len(self.timestamps):
            raise ShapeError(f"{n_times} frames but {len(self.timestamps)} timestamps")
        steps = {b - a for a, b in zip(self.timestamps, self.timestamps[1:])}
        if len(steps) > 1:
            raise DataError("timestamps must be uniformly spaced")
        if steps and next(iter(steps)) <= timedelta(0):
            raise DataError("timestamps must be strictly increasing")
        if not np.isfinite(data).all():
            raise DataError("series data contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def n_times(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def dt(self) -> Optional[timedelta]:
        if self.n_times < 2:
            return None
        return self.timestamps[1] - self.timestamps[0]

    def with_schema(self, schema: ChannelSchema) -> "WeatherSeries":
        return WeatherSeries(grid=self.grid, schema=schema, timestamps=self.timestamps, data=self.data)

    def normalized(self) -> np.ndarray:
        return self.schema.normalize(self.data)

    def normalized_tensor(self, device: Optional[str] = None) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.normalized())).to(device or settings.DEVICE)


def _as_range(split: Optional[IndexRange], length: int) -> range:
    if split is None:
        return range(length)
    if isinstance(split, range):
        return split
    if isinstance(split, slice):
        return range(length)[split]
    start, stop = split
    return range(start, stop)


def compute_normalization(series: WeatherSeries, split: Optional[IndexRange] = None) -> ChannelSchema:
    """Per-channel mean/std over time, lat and lon of ``split`` (the whole series by default)."""
    indices = _as_range(split, series.n_times)
    if len(indices) == 0:
        raise DataError("cannot compute normalization statistics over an empty split")
    if indices.start < 0 or indices[-1] >= series.n_times:
        raise DataError(f"split {indices} outside series of length {series.n_times}")
    block = series.data[indices.start:indices.stop:indices.step].astype(np.float64)
    means = block.mean(axis=(0, 2, 3))
    stds = block.std(axis=(0, 2, 3))
    for name, std in zip(series.schema.names, stds):
        if std < settings.STD_EPSILON:
            logger.warning("Channel %s has (near) zero variance; std guarded to %g", name, settings.STD_EPSILON)
    stds = np.maximum(stds, settings.STD_EPSILON)
    return series.schema.with_stats(means, stds)


@dataclass(frozen=True)
class SampleWindow:
    input_indices: Tuple[int, ...]
    target_indices: Tuple[int, ...]
    horizon_steps: int

    @property
    def n_input_steps(self) -> int:
        return len(self.input_indices)

    @property
    def last_input_index(self) -> int:
        return self.input_indices[-1]

    @property
    def target_index(self) -> int:
        return self.target_indices[0]

    @property
    def indices(self) -> Tuple[int, ...]:
        return self.input_indices + self.target_indices


def window_count(n_times: int, n_input_steps: int, horizon_steps: int, input_stride: int = 1, rollout_steps: int = 1) -> int:
    return n_times - (n_input_steps - 1) * input_stride - rollout_steps * horizon_steps


def make_windows(
    series: Union[WeatherSeries, int],
    n_input_steps: int,
    horizon_steps: int,
    input_stride: int = 1,
    rollout_steps: int = 1,
) -> List[SampleWindow]:
    """Every valid window in time order.

    Inputs are ``n_input_steps`` frames spaced by ``input_stride``; targets are
    the ``rollout_steps`` frames following the last input at ``horizon_steps``
    spacing.
    """
    if n_input_steps < 1 or horizon_steps < 1 or input_stride < 1 or rollout_steps < 1:
        raise ConfigError("n_input_steps, horizon_steps, input_stride and rollout_steps must be >= 1")
    n_times = series if isinstance(series, int) else series.n_times
    count = window_count(n_times, n_input_steps, horizon_steps, input_stride, rollout_steps)
    if count < 1:
        raise DataError(
            f"series of length {n_times} is too short for {n_input_steps} input steps, "
            f"horizon {horizon_steps} and {rollout_steps} rollout steps"
        )
    windows = []
    for start in range(count):
        inputs = tuple(start + j * input_stride for j in range(n_input_steps))
        targets = tuple(inputs[-1] + (k + 1) * horizon_steps for k in range(rollout_steps))
        windows.append(SampleWindow(inputs, targets, horizon_steps))
    return windows


@dataclass(frozen=True)
class DataSplit:
    train: range
    val: range
    test: range


def split_ranges(n_times: int, fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> DataSplit:
    """Chronological, disjoint train/val/test index ranges."""
    if n_times < 1:
        raise DataError("cannot split an empty series")
    train_end = int(round(n_times * fractions[0]))
    val_end = int(round(n_times * (fractions[0] + fractions[1])))
    return DataSplit(range(0, train_end), range(train_end, val_end), range(val_end, n_times))


def windows_in(windows: Sequence[SampleWindow], indices: range) -> List[SampleWindow]:
    return [w for w in windows if min(w.indices) >= indices.start and max(w.indices) < indices.stop]


def input_channel_count(n_channels: int, n_input_steps: int, extras: ExtrasConfig) -> int:
    return n_input_steps * n_channels + (1 if extras.zenith else 0) + extras.n_static


def assemble_input(
    steps: Sequence[torch.Tensor],
    extras: ExtrasConfig,
    grid: GridSpec,
    timestamps: Optional[Sequence[datetime]] = None,
    static: Optional[StaticChannelSet] = None,
    zenith_mean_std: Optional[Tuple[float, float]] = None,
) -> torch.Tensor:
    """Stack n dynamic steps (oldest first), then zenith, then static channels.

    Each step is ``[B, C, H, W]``; zenith is evaluated at each sample's
    last-input timestamp only and static channels are appended once.
    """
    if not steps:
        raise ShapeError("at least one input step is required")
    shape = steps[0].shape
    if any(s.shape != shape for s in steps):
        raise ShapeError(f"input steps disagree in shape: {[tuple(s.shape) for s in steps]}")
    if tuple(shape[-2:]) != grid.shape:
        raise ShapeError(f"input steps have grid {tuple(shape[-2:])}, expected {grid.shape}")
    batch = shape[0]
    parts = list(steps)
    if extras.zenith:
        if timestamps is None or len(timestamps) != batch or any(t is None for t in timestamps):
            raise DataError("zenith channel requested but last-step timestamps are missing")
        zenith = np.stack([solar_zenith_cos(grid, t) for t in timestamps])[:, None]
        if extras.zenith_standardize and zenith_mean_std is not None:
            mean, std = zenith_mean_std
            zenith = (zenith - mean) / std
        parts.append(torch.as_tensor(zenith, dtype=steps[0].dtype, device=steps[0].device))
    expected_static = extras.n_static
    n_static = 0 if static is None else len(static)
    if n_static != expected_static:
        raise ShapeError(f"extras expect {expected_static} static channels, got {n_static}")
    if n_static:
        fixed = torch.as_tensor(static.stack(), dtype=steps[0].dtype, device=steps[0].device)
        parts.append(fixed.unsqueeze(0).expand(batch, -1, -1, -1))
    return torch.cat(parts, dim=1)


class InputAssembler:
    """Binds grid, extras and static channels so callers only pass dynamic steps."""

    def __init__(
        self,
        grid: GridSpec,
        n_channels: int,
        n_input_steps: int,
        extras: ExtrasConfig,
        static: Optional[StaticChannelSet] = None,
        zenith_mean_std: Optional[Tuple[float, float]] = None,
    ):
        self.grid = grid
        self.n_channels = n_channels
        self.n_input_steps = n_input_steps
        self.extras = extras
        self.static = static if static is not None else StaticChannelSet()
        self.zenith_mean_std = zenith_mean_std

    @classmethod
    def for_series(
        cls,
        series: WeatherSeries,
        n_input_steps: int,
        extras: ExtrasConfig,
        static: Optional[StaticChannelSet] = None,
    ) -> "InputAssembler":
        stats = zenith_stats(series.grid, series.timestamps) if extras.zenith else None
        return cls(series.grid, series.n_channels, n_input_steps, extras, static, stats)

    @property
    def in_channels(self) -> int:
        return input_channel_count(self.n_channels, self.n_input_steps, self.extras)

    @property
    def out_channels(self) -> int:
        return self.n_channels

    @property
    def dynamic_channels(self) -> slice:
        return slice(0, self.n_input_steps * self.n_channels)

    @property
    def zenith_channel(self) -> Optional[int]:
        return self.n_input_steps * self.n_channels if self.extras.zenith else None

    def __call__(self, steps: Sequence[torch.Tensor], timestamps: Optional[Sequence[datetime]] = None) -> torch.Tensor:
        if len(steps) != self.n_input_steps:
            raise ShapeError(f"expected {self.n_input_steps} input steps, got {len(steps)}")
        if steps[0].shape[1] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} channels per step, got {steps[0].shape[1]}")
        return assemble_input(steps, self.extras, self.grid, timestamps, self.static, self.zenith_mean_std)


def gather_steps(data: torch.Tensor, windows: Sequence[SampleWindow]) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """Batch the input and target frames of ``windows`` from a [T, C, H, W] tensor."""
    n_inputs = windows[0].n_input_steps
    n_targets = len(windows[0].target_indices)
    inputs = [data[[w.input_indices[j] for w in windows]] for j in range(n_inputs)]
    targets = [data[[w.target_indices[k] for w in windows]] for k in range(n_targets)]
    return inputs, targets


def last_input_times(series: WeatherSeries, windows: Sequence[SampleWindow]) -> List[datetime]:
    return [series.timestamps[w.last_input_index] for w in windows]
