"""Configurable UNet on lat-lon grids.

Topology: 3x3 stem projecting C_in to ``base_width``; stage 0 is a double
conv block; every further stage downsamples with a stride-2 3x3 conv that
doubles the width, followed by a double conv block. The decoder upsamples
with 2x2 transposed convs, concatenates the matching encoder output when
skip connections are on, and applies a double conv block. A 1x1 head maps
back to C channels. Every 3x3 conv pads with the configured scheme.
"""

import logging
import math
from typing import List, Optional

import torch
from torch import nn

from app.backend.errors import ShapeError
from app.backend.models.padding import SphereConv2d
from app.backend.schemas import PaddingScheme, UNetConfig

logger = logging.getLogger(__name__)


class DoubleConv(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, scheme: PaddingScheme):
        groups = math.gcd(8, out_channels)
        super().__init__(
            SphereConv2d(in_channels, out_channels, 3, scheme),
            nn.GroupNorm(groups, out_channels),
            nn.GELU(),
            SphereConv2d(out_channels, out_channels, 3, scheme),
            nn.GroupNorm(groups, out_channels),
            nn.GELU(),
        )


class DownStage(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, scheme: PaddingScheme):
        super().__init__(
            SphereConv2d(in_channels, out_channels, 3, scheme, stride=2),
            DoubleConv(out_channels, out_channels, scheme),
        )


class UpStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, scheme: PaddingScheme, skip: bool):
        super().__init__()
        self.skip = skip
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.block = DoubleConv(2 * out_channels if skip else out_channels, out_channels, scheme)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor]) -> torch.Tensor:
        x = self.up(x)
        if self.skip:
            x = torch.cat([skip, x], dim=1)
        return self.block(x)


class UNet(nn.Module):
    STEM = "stem"
    HEAD = "head"

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.stem = SphereConv2d(cfg.in_channels, widths[0], 3, cfg.padding)
        self.encoder = nn.ModuleList(
            [DoubleConv(widths[0], widths[0], cfg.padding)]
            + [DownStage(widths[s - 1], widths[s], cfg.padding) for s in range(1, cfg.n_blocks)]
        )
        self.decoder = nn.ModuleList(
            [UpStage(widths[s], widths[s - 1], cfg.padding, cfg.skip_connections) for s in range(cfg.n_blocks - 1, 0, -1)]
        )
        self.head = nn.Conv2d(widths[0], cfg.out_channels, kernel_size=1)

    @property
    def in_channels(self) -> int:
        return self.cfg.in_channels

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def head_parameter_names(self) -> List[str]:
        """Parameters of the first and last layer, the ones tied to the channel counts."""
        names = [f"{self.STEM}.{n}" for n, _ in self.stem.named_parameters()]
        return names + [f"{self.HEAD}.{n}" for n, _ in self.head.named_parameters()]

    def check_grid(self, n_lat: int, n_lon: int) -> None:
        factor = self.cfg.downsampling_factor
        if n_lat % factor or n_lon % factor:
            raise ShapeError(
                f"grid {n_lat}x{n_lon} not divisible by 2^(n_blocks-1) = {factor} "
                f"required by a {self.cfg.n_blocks}-block UNet"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"UNet expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        self.check_grid(*x.shape[-2:])
        x = self.stem(x)
        features = []
        for stage in self.encoder:
            x = stage(x)
            features.append(x)
        for stage, skip in zip(self.decoder, reversed(features[:-1])):
            x = stage(x, skip)
        return self.head(x)


def build_unet(cfg: UNetConfig, seed: Optional[int] = None) -> UNet:
    if seed is None:
        return UNet(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)
