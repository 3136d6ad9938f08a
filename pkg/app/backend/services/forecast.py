"""Direct/delta prediction and autoregressive rollout."""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch import nn

from app.backend.errors import DataError, ShapeError
from app.backend.schemas import METRIC_COLUMNS, EvaluationConfig, ForecastConfig, MetricReport
from app.backend.services.dataset import (
    InputAssembler,
    WeatherSeries,
    gather_steps,
    last_input_times,
    make_windows,
    windows_in,
)
from app.backend.services.objectives import build_metric_report, metric_acc, metric_rmse
from app.backend.services.sphere_grid import quadrature_weights

logger = logging.getLogger(__name__)

Formulation = Literal["direct", "delta"]


def step(model: nn.Module, assembled_input: torch.Tensor, last_state: torch.Tensor, formulation: Formulation) -> torch.Tensor:
    out = model(assembled_input)
    if out.shape != last_state.shape:
        raise ShapeError(f"model output {tuple(out.shape)} does not match state {tuple(last_state.shape)}")
    if formulation == "delta":
        return last_state + out
    return out


def advance(timestamps: Sequence[datetime], delta: timedelta) -> List[datetime]:
    try:
        return [t + delta for t in timestamps]
    except OverflowError as exc:
        raise DataError(f"timestamp arithmetic overflow advancing by {delta}") from exc


@dataclass
class RolloutResult:
    states: List[torch.Tensor]
    timestamps: List[List[datetime]]
    inputs: List[torch.Tensor] = field(default_factory=list)
    reports: List[MetricReport] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.states)


def rollout(
    model: nn.Module,
    history: Sequence[torch.Tensor],
    timestamps: Optional[Sequence[datetime]],
    n_steps: int,
    assembler: InputAssembler,
    formulation: Formulation,
    step_delta: timedelta,
    truth: Optional[Sequence[torch.Tensor]] = None,
    prediction_weight: float = 1.0,
    keep_inputs: bool = False,
) -> RolloutResult:
    """Roll ``model`` forward ``n_steps`` times from the ground-truth window ``history``.

    ``timestamps`` are the per-sample times of the last history step. With
    ``truth`` the state fed back is ``w * prediction + (1 - w) * truth`` for
    ``w = prediction_weight``; returned states are always the raw predictions.
    No noise is applied.
    """
    if n_steps < 1:
        raise DataError("rollout needs at least one step")
    if truth is not None and len(truth) < n_steps - 1:
        raise DataError(f"scheduled sampling needs {n_steps - 1} truth states, got {len(truth)}")
    window = list(history)
    times = list(timestamps) if timestamps is not None else None
    result = RolloutResult(states=[], timestamps=[])
    for j in range(n_steps):
        x = assembler(window, times)
        if keep_inputs:
            result.inputs.append(x.detach())
        state = step(model, x, window[-1], formulation)
        if times is not None:
            times = advance(times, step_delta)
        result.states.append(state)
        result.timestamps.append(list(times) if times is not None else [])
        fed = state
        if truth is not None and j < n_steps - 1 and prediction_weight < 1.0:
            fed = prediction_weight * state + (1.0 - prediction_weight) * truth[j]
        window = window[1:] + [fed]
    return result


def horizon_delta(series: WeatherSeries, forecast: ForecastConfig) -> timedelta:
    if series.dt is None:
        return timedelta(0)
    return series.dt * forecast.horizon_steps


def evaluate_horizons(
    model: nn.Module,
    series: WeatherSeries,
    assembler: InputAssembler,
    forecast: ForecastConfig,
    evaluation: EvaluationConfig,
    split: range,
    run_id: str = "",
    climatology: Optional[np.ndarray] = None,
) -> Tuple[List[MetricReport], pd.DataFrame]:
    """Metrics of the rollout at each horizon, averaged over test-split initial conditions."""
    n_max = max(evaluation.horizons)
    try:
        windows = make_windows(
            series, forecast.n_input_steps, forecast.horizon_steps, forecast.input_stride, rollout_steps=n_max
        )
    except DataError as exc:
        raise DataError(f"horizons {evaluation.horizons} do not fit the series: {exc}") from exc
    windows = windows_in(windows, split)
    if not windows:
        raise DataError(f"no initial conditions in the test split {split} for horizons up to {n_max}")
    if evaluation.max_initial_conditions is not None:
        windows = windows[: evaluation.max_initial_conditions]
    data = series.normalized_tensor()
    weights = quadrature_weights(series.grid)
    delta = horizon_delta(series, forecast)
    preds = {h: [] for h in evaluation.horizons}
    targets = {h: [] for h in evaluation.horizons}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(windows), evaluation.batch_size):
            batch = windows[start:start + evaluation.batch_size]
            history, truth = gather_steps(data, batch)
            result = rollout(
                model, history, last_input_times(series, batch), n_max, assembler, forecast.formulation, delta
            )
            for h in evaluation.horizons:
                preds[h].append(result.states[h - 1])
                targets[h].append(truth[h - 1])
    reports = []
    for h in evaluation.horizons:
        pred, target = torch.cat(preds[h]), torch.cat(targets[h])
        rmse = metric_rmse(pred, target, weights)
        acc = metric_acc(pred, target, weights, climatology)
        reports.append(build_metric_report(h, series.schema.names, rmse, acc))
    logger.info(
        "Evaluated %d initial conditions: %s",
        len(windows),
        ", ".join(f"h={r.horizon_steps} rmse={r.rmse_mean:.4f}" for r in reports),
    )
    rows = [row for report in reports for row in report.to_rows(run_id)]
    return reports, pd.DataFrame(rows, columns=METRIC_COLUMNS)


def rollout_series(
    model: nn.Module,
    series: WeatherSeries,
    assembler: InputAssembler,
    forecast: ForecastConfig,
    start_index: int,
    n_steps: int,
) -> WeatherSeries:
    """Denormalized rollout from one initial condition, as a series for export."""
    windows = make_windows(series, forecast.n_input_steps, forecast.horizon_steps, forecast.input_stride)
    matching = [w for w in windows if w.input_indices[0] == start_index]
    if not matching:
        raise DataError(f"no input window starts at index {start_index}")
    window = matching[0]
    data = series.normalized_tensor()
    history, _ = gather_steps(data, [window])
    model.eval()
    with torch.no_grad():
        result = rollout(
            model,
            history,
            last_input_times(series, [window]),
            n_steps,
            assembler,
            forecast.formulation,
            horizon_delta(series, forecast),
        )
    states = torch.cat(result.states).cpu().numpy()
    times = tuple(ts[0] for ts in result.timestamps)
    return WeatherSeries(grid=series.grid, schema=series.schema, timestamps=times, data=series.schema.denormalize(states))
