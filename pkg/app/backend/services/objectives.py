"""Training losses and latitude-weighted evaluation metrics."""

import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
import torch

from app.backend.errors import ConfigError, DataError, ShapeError
from app.backend.schemas import LossConfig, MetricReport

logger = logging.getLogger(__name__)


def _check_pair(pred: Any, target: Any) -> None:
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.ndim < 3:
        raise ShapeError(f"fields must be [..., C, H, W], got shape {tuple(pred.shape)}")


def _row_weights(weights: Any, like: torch.Tensor) -> torch.Tensor:
    w = weights if torch.is_tensor(weights) else torch.tensor(np.array(weights, dtype=np.float64))
    w = w.to(dtype=like.dtype, device=like.device).reshape(-1)
    if w.numel() != like.shape[-2]:
        raise ShapeError(f"quadrature weights have length {w.numel()}, fields have {like.shape[-2]} rows")
    return w.reshape(-1, 1)


def loss_map(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig, weights: Optional[Any] = None) -> torch.Tensor:
    """Elementwise loss terms; ``loss`` is their mean."""
    _check_pair(pred, target)
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise DataError("loss inputs contain non-finite values")
    err = pred - target
    if cfg.kind == "mse":
        return err**2
    if cfg.kind == "l1":
        return err.abs()
    if cfg.kind == "huber":
        delta = cfg.huber_delta
        abs_err = err.abs()
        return torch.where(abs_err <= delta, 0.5 * err**2, delta * (abs_err - 0.5 * delta))
    if cfg.kind == "l1_l2":
        return cfg.l1_weight * err.abs() + cfg.l2_weight * err**2
    if weights is None:
        raise ConfigError(f"loss '{cfg.kind}' needs quadrature weights")
    w = _row_weights(weights, pred)
    if cfg.kind == "geo_mse":
        return w * err**2
    return w * err.abs()


def loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig, weights: Optional[Any] = None) -> torch.Tensor:
    return loss_map(pred, target, cfg, weights).mean()


def masked_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    channel_mask: torch.Tensor,
    cfg: LossConfig,
    weights: Optional[Any] = None,
) -> torch.Tensor:
    """Loss averaged over masked channels only; ``channel_mask`` is [B, C]."""
    terms = loss_map(pred, target, cfg, weights)
    if tuple(channel_mask.shape) != tuple(pred.shape[:2]):
        raise ShapeError(f"channel mask {tuple(channel_mask.shape)} does not match batch/channels {tuple(pred.shape[:2])}")
    mask = channel_mask.to(terms.dtype)[..., None, None]
    count = mask.sum() * pred.shape[-2] * pred.shape[-1]
    if count == 0:
        raise ConfigError("masked loss with no masked channels")
    return (terms * mask).sum() / count


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class ChannelScores:
    values: np.ndarray
    mean: Optional[float]


def _as_numpy(x: Any) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _batched(pred: Any, target: Any, weights: Any) -> tuple:
    p, t = _as_numpy(pred), _as_numpy(target)
    _check_pair(p, t)
    w = _as_numpy(weights).reshape(-1)
    if w.size != p.shape[-2]:
        raise ShapeError(f"quadrature weights have length {w.size}, fields have {p.shape[-2]} rows")
    p = p.reshape((-1,) + p.shape[-3:])
    t = t.reshape((-1,) + t.shape[-3:])
    return p, t, w[:, None]


def metric_rmse(pred: Any, target: Any, weights: Any) -> ChannelScores:
    """Per-channel sqrt(mean_{h,w} w(h) e^2), averaged over any leading batch dims."""
    p, t, w = _batched(pred, target, weights)
    per_sample = np.sqrt((w * (p - t) ** 2).mean(axis=(-2, -1)))
    values = per_sample.mean(axis=0)
    return ChannelScores(values=values, mean=float(values.mean()))


def metric_acc(pred: Any, target: Any, weights: Any, climatology: Optional[Any] = None) -> ChannelScores:
    """Per-channel latitude-weighted correlation of the fields as given.

    With ``climatology`` ([C, H, W]) both fields are first reduced to
    anomalies. Channels whose weighted norm vanishes in either field are
    undefined (NaN) and left out of the mean.
    """
    p, t, w = _batched(pred, target, weights)
    if climatology is not None:
        clim = _as_numpy(climatology)
        p, t = p - clim, t - clim
    num = (w * p * t).sum(axis=(-2, -1))
    den = np.sqrt((w * p**2).sum(axis=(-2, -1)) * (w * t**2).sum(axis=(-2, -1)))
    undefined = den == 0.0
    per_sample = np.where(undefined, np.nan, num / np.where(undefined, 1.0, den))
    per_sample = np.clip(per_sample, -1.0, 1.0)
    all_undefined = undefined.all(axis=0)
    if all_undefined.any():
        logger.warning("ACC undefined (zero norm) for channel indices %s", np.flatnonzero(all_undefined).tolist())
    with np.errstate(invalid="ignore"):
        counts = (~undefined).sum(axis=0)
        values = np.where(counts > 0, np.nansum(per_sample, axis=0) / np.maximum(counts, 1), np.nan)
    defined = values[~np.isnan(values)]
    return ChannelScores(values=values, mean=float(defined.mean()) if defined.size else None)


def build_metric_report(
    horizon_steps: int, channels: Sequence[str], rmse: ChannelScores, acc: ChannelScores
) -> MetricReport:
    return MetricReport(
        horizon_steps=horizon_steps,
        channels=list(channels),
        rmse=[float(v) for v in rmse.values],
        acc=[None if np.isnan(v) else float(v) for v in acc.values],
        rmse_mean=float(rmse.mean),
        acc_mean=acc.mean,
    )
