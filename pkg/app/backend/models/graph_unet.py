"""UNet core wrapped by graph kernel layers that map point sets to and from the latent grid."""

import logging
from typing import Optional

import numpy as np
import torch
from torch import nn

from app.backend.errors import ShapeError
from app.backend.models.unet import UNet
from app.backend.schemas import GraphUNetConfig, GridSpec
from app.backend.services.sphere_grid import point_coordinates

logger = logging.getLogger(__name__)


def _check_points(xyz: Optional[torch.Tensor], what: str) -> torch.Tensor:
    if xyz is None:
        raise ShapeError(f"{what} coordinates are missing")
    xyz = torch.as_tensor(xyz)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ShapeError(f"{what} coordinates must be [N, 3], got {tuple(xyz.shape)}")
    return xyz


def nearest_neighbors(sources: torch.Tensor, targets: torch.Tensor, k: int) -> torch.Tensor:
    """Indices [N_t, k] of the k sources closest to each target by chordal distance.

    Ties are broken by source coordinates, so the chosen set does not depend
    on the order in which sources are given.
    """
    n_sources = sources.shape[0]
    if k > n_sources:
        raise ShapeError(f"k = {k} neighbors requested but only {n_sources} source points exist")
    src = sources.detach().to(torch.float64)
    tgt = targets.detach().to(torch.float64)
    coords = src.cpu().numpy()
    order = torch.as_tensor(np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0])), device=src.device)
    dist = ((tgt[:, None, :] - src[None, order, :]) ** 2).sum(-1)
    ranked = torch.argsort(dist, dim=1, stable=True)[:, :k]
    return order[ranked].to(sources.device)


class GraphKernelLayer(nn.Module):
    """Mean over k nearest sources of kernel(x_s, x_t, x_s - x_t) * Linear(v_s)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_width: int, k: int):
        super().__init__()
        self.k = k
        self.lift = nn.Linear(in_channels, out_channels)
        self.kernel = nn.Sequential(
            nn.Linear(9, kernel_width),
            nn.GELU(),
            nn.Linear(kernel_width, out_channels),
        )

    def reset_parameters(self) -> None:
        for module in (self.lift, *self.kernel):
            if hasattr(module, "reset_parameters"):
                module.reset_parameters()

    def forward(
        self,
        features: torch.Tensor,
        sources: torch.Tensor,
        targets: torch.Tensor,
        neighbors: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """features [B, N_s, C_in] at ``sources`` -> [B, N_t, C_out] at ``targets``."""
        if features.shape[1] != sources.shape[0]:
            raise ShapeError(f"{features.shape[1]} feature points but {sources.shape[0]} coordinates")
        if neighbors is None:
            neighbors = nearest_neighbors(sources, targets, self.k)
        src = sources.to(features.dtype)[neighbors]
        tgt = targets.to(features.dtype)[:, None, :].expand_as(src)
        kernel = self.kernel(torch.cat([src, tgt, src - tgt], dim=-1))
        lifted = self.lift(features)[:, neighbors]
        return (kernel.unsqueeze(0) * lifted).mean(dim=2)


class GraphUNet(nn.Module):
    STEM = "encoder.0"
    HEAD = "decoder.1"

    def __init__(self, cfg: GraphUNetConfig, grid: GridSpec):
        super().__init__()
        self.cfg = cfg
        self.grid = grid
        latent = cfg.latent_channels
        self.encoder = nn.ModuleList([
            GraphKernelLayer(cfg.in_channels, latent, cfg.kernel_width, cfg.k),
            GraphKernelLayer(latent, latent, cfg.kernel_width, cfg.k),
        ])
        self.core = UNet(cfg.core)
        self.decoder = nn.ModuleList([
            GraphKernelLayer(latent, latent, cfg.kernel_width, cfg.k),
            GraphKernelLayer(latent, cfg.out_channels, cfg.kernel_width, cfg.k),
        ])
        self.activation = nn.GELU()
        self.core.check_grid(*grid.shape)
        latent_xyz = torch.as_tensor(point_coordinates(grid), dtype=torch.float32)
        self.register_buffer("latent_xyz", latent_xyz, persistent=False)
        self.register_buffer("latent_neighbors", nearest_neighbors(latent_xyz, latent_xyz, cfg.k), persistent=False)

    @property
    def in_channels(self) -> int:
        return self.cfg.in_channels

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def head_parameter_names(self) -> list:
        names = [f"{self.STEM}.{n}" for n, _ in self.encoder[0].named_parameters()]
        return names + [f"{self.HEAD}.{n}" for n, _ in self.decoder[1].named_parameters()]

    def encode(self, features: torch.Tensor, input_xyz: torch.Tensor) -> torch.Tensor:
        """[B, N, C_in] at arbitrary points -> latent grid [B, latent, H, W]."""
        input_xyz = _check_points(input_xyz, "input").to(self.latent_xyz)
        h = self.activation(self.encoder[0](features, input_xyz, self.latent_xyz))
        h = self.encoder[1](h, self.latent_xyz, self.latent_xyz, self.latent_neighbors)
        batch = features.shape[0]
        return h.transpose(1, 2).reshape(batch, -1, *self.grid.shape)

    def decode(self, latent: torch.Tensor, query_xyz: torch.Tensor) -> torch.Tensor:
        """Latent grid [B, latent, H, W] -> [B, N_q, C] at query points."""
        query_xyz = _check_points(query_xyz, "query").to(self.latent_xyz)
        h = latent.flatten(2).transpose(1, 2)
        h = self.activation(self.decoder[0](h, self.latent_xyz, self.latent_xyz, self.latent_neighbors))
        return self.decoder[1](h, self.latent_xyz, query_xyz)

    def forward_points(self, features: torch.Tensor, input_xyz: torch.Tensor, query_xyz: torch.Tensor) -> torch.Tensor:
        return self.decode(self.core(self.encode(features, input_xyz)), query_xyz)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"Graph UNet expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if tuple(x.shape[-2:]) != self.grid.shape:
            raise ShapeError(f"input grid {tuple(x.shape[-2:])} differs from the latent grid {self.grid.shape}")
        points = x.flatten(2).transpose(1, 2)
        out = self.forward_points(points, self.latent_xyz, self.latent_xyz)
        return out.transpose(1, 2).reshape(x.shape[0], -1, *self.grid.shape)


def build_graph_unet(cfg: GraphUNetConfig, grid: GridSpec, seed: Optional[int] = None) -> GraphUNet:
    if seed is None:
        return GraphUNet(cfg, grid)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GraphUNet(cfg, grid)
