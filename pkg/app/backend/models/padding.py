"""Sphere-aware padding for lat-lon grids."""

from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

from app.backend.errors import ShapeError
from app.backend.schemas import PaddingScheme


def pad2d(x: torch.Tensor, scheme: PaddingScheme, pad: Tuple[int, int]) -> torch.Tensor:
    """Pad the last two axes by (py, px); latitude first, then longitude."""
    py, px = pad
    n_lat, n_lon = x.shape[-2:]
    if py >= n_lat or px >= n_lon:
        raise ShapeError(f"padding {(py, px)} too large for a {n_lat}x{n_lon} field")
    if py:
        if scheme.y_mode == "reflect":
            top = x[..., 1:py + 1, :].flip(-2)
            bottom = x[..., -py - 1:-1, :].flip(-2)
            x = torch.cat([top, x, bottom], dim=-2)
        else:
            x = F.pad(x, (0, 0, py, py))
    if px:
        if scheme.x_mode == "circular":
            x = torch.cat([x[..., -px:], x, x[..., :px]], dim=-1)
        else:
            x = F.pad(x, (px, px, 0, 0))
    return x


class SphereConv2d(nn.Module):
    """Odd-kernel convolution preceded by ``pad2d`` with the configured scheme."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, scheme: PaddingScheme, stride: int = 1):
        super().__init__()
        self.scheme = scheme
        self.pad = kernel_size // 2
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=0)

    def reset_parameters(self) -> None:
        self.conv.reset_parameters()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(pad2d(x, self.scheme, (self.pad, self.pad)))
