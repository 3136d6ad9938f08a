"""Model registry: every architecture is built from ``ModelConfig`` plus channel counts and grid."""

import logging
from typing import Callable, Dict, Optional

import torch
from torch import nn

from app.backend.errors import ConfigError
from app.backend.models.graph_unet import build_graph_unet
from app.backend.models.unet import build_unet
from app.backend.schemas import GridSpec, ModelConfig

logger = logging.getLogger(__name__)

ModelBuilder = Callable[[ModelConfig, int, int, GridSpec, Optional[bool], Optional[int]], nn.Module]


def _unet(cfg: ModelConfig, in_channels: int, out_channels: int, grid: GridSpec, skip: Optional[bool], seed: Optional[int]) -> nn.Module:
    model = build_unet(cfg.unet(in_channels, out_channels, skip), seed)
    model.check_grid(*grid.shape)
    return model


def _graph_unet(cfg: ModelConfig, in_channels: int, out_channels: int, grid: GridSpec, skip: Optional[bool], seed: Optional[int]) -> nn.Module:
    return build_graph_unet(cfg.graph_unet(in_channels, out_channels, skip), grid, seed)


MODEL_BUILDERS: Dict[str, ModelBuilder] = {
    "unet": _unet,
    "graph_unet": _graph_unet,
}


def register_model(name: str, builder: ModelBuilder) -> None:
    """Add a third-party architecture honouring the [B, C_in, H, W] -> [B, C, H, W] contract."""
    if name in MODEL_BUILDERS:
        raise ConfigError(f"model '{name}' is already registered")
    MODEL_BUILDERS[name] = builder


def build_model(
    cfg: ModelConfig,
    in_channels: int,
    out_channels: int,
    grid: GridSpec,
    skip_connections: Optional[bool] = None,
    seed: Optional[int] = None,
) -> nn.Module:
    if cfg.name not in MODEL_BUILDERS:
        raise ConfigError(f"unknown model '{cfg.name}' (registered: {sorted(MODEL_BUILDERS)})")
    model = MODEL_BUILDERS[cfg.name](cfg, in_channels, out_channels, grid, skip_connections, seed)
    logger.info("Built %s: %d -> %d channels, %d parameters", cfg.name, in_channels, out_channels, count_parameters(model))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def conv_weight_count(model: nn.Module) -> int:
    """Convolution kernel entries only (biases and norm affine terms excluded)."""
    convs = (nn.Conv2d, nn.ConvTranspose2d)
    return sum(m.weight.numel() for m in model.modules() if isinstance(m, convs))


def head_parameter_names(model: nn.Module) -> list:
    names = getattr(model, "head_parameter_names", None)
    return list(names()) if callable(names) else []


def reset_module_parameters(model: nn.Module, parameter_names) -> None:
    """Re-run ``reset_parameters`` on the modules owning ``parameter_names``."""
    owners = {name.rsplit(".", 1)[0] for name in parameter_names}
    modules = dict(model.named_modules())
    with torch.no_grad():
        for owner in sorted(owners):
            module = modules.get(owner)
            if module is not None and hasattr(module, "reset_parameters"):
                module.reset_parameters()
