"""Training-time input perturbation: Gaussian and longitude-periodic Perlin noise."""

import logging
from typing import Optional, Tuple

import numpy as np
import torch

from app.backend.errors import ConfigError
from app.backend.schemas import NoiseConfig

logger = logging.getLogger(__name__)

# unit gradients give |n| <= sqrt(2)/2 for one octave
PERLIN_PEAK = np.sqrt(0.5)


def gaussian_perturb(field: torch.Tensor, cfg: NoiseConfig, generator: torch.Generator) -> torch.Tensor:
    if cfg.amplitude == 0.0:
        return field
    noise = torch.randn(field.shape, generator=generator, dtype=field.dtype, device=generator.device)
    return field + cfg.amplitude * noise.to(field.device)


def fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


class PerlinLattice:
    """Random unit gradients on an (n_y + 1) x n_x node lattice, periodic along x."""

    def __init__(self, n_y: int, n_x: int, rng: np.random.Generator):
        if n_y < 2 or n_x < 2:
            raise ConfigError(f"Perlin lattice needs at least 2 cells per axis, got {(n_y, n_x)}")
        self.n_y = n_y
        self.n_x = n_x
        angles = rng.uniform(0.0, 2.0 * np.pi, size=(n_y + 1, n_x))
        self.gradients = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    def evaluate(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Noise at lattice coordinates; y in [0, n_y], x wraps modulo n_x."""
        y = np.asarray(y, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        y0 = np.clip(np.floor(y).astype(int), 0, self.n_y - 1)
        fy = y - y0
        x_floor = np.floor(x)
        fx = x - x_floor
        x0 = x_floor.astype(int) % self.n_x
        x1 = (x0 + 1) % self.n_x
        g = self.gradients

        def dot(iy, ix, dx, dy):
            return g[iy, ix, 0] * dx + g[iy, ix, 1] * dy

        n00 = dot(y0, x0, fx, fy)
        n10 = dot(y0, x1, fx - 1.0, fy)
        n01 = dot(y0 + 1, x0, fx, fy - 1.0)
        n11 = dot(y0 + 1, x1, fx - 1.0, fy - 1.0)
        u, v = fade(fx), fade(fy)
        bottom = n00 + u * (n10 - n00)
        top = n01 + u * (n11 - n01)
        return bottom + v * (top - bottom)


def grid_coordinates(
    shape: Tuple[int, int], lattice: Tuple[int, int], offset: Tuple[float, float] = (0.0, 0.0)
) -> Tuple[np.ndarray, np.ndarray]:
    """Lattice coordinates of grid rows/columns; column W maps onto the seam at n_x."""
    n_lat, n_lon = shape
    ys = np.arange(n_lat) * lattice[0] / n_lat + offset[0]
    xs = np.arange(n_lon) * lattice[1] / n_lon + offset[1]
    return np.meshgrid(ys, xs, indexing="ij")


def octave_offset(shape: Tuple[int, int], lattice: Tuple[int, int], octave: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Random sub-cell phase for octaves above the first.

    Once the lattice is as fine as the grid, unshifted rows and columns land on
    lattice nodes, where the noise vanishes. The y shift stays below one grid
    row so the last row remains inside the lattice; any x shift keeps the seam
    periodic because ``evaluate`` wraps modulo n_x.
    """
    if octave == 0:
        return 0.0, 0.0
    dy = rng.uniform(0.0, min(1.0, lattice[0] / shape[0]))
    dx = rng.uniform(0.0, 1.0)
    return float(dy), float(dx)


def perlin_noise(shape: Tuple[int, int], cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Multi-octave noise of shape (H, W); a single octave peaks at ``cfg.amplitude``."""
    out = np.zeros(shape, dtype=np.float64)
    for octave in range(cfg.octaves):
        scale = 2**octave
        lattice = (cfg.lattice[0] * scale, cfg.lattice[1] * scale)
        field = PerlinLattice(*lattice, rng)
        y, x = grid_coordinates(shape, lattice, octave_offset(shape, lattice, octave, rng))
        out += cfg.persistence**octave * field.evaluate(y, x)
    return cfg.amplitude / PERLIN_PEAK * out


def perlin_perturb(field: torch.Tensor, cfg: NoiseConfig, rng: np.random.Generator) -> torch.Tensor:
    """Adds an independent noise field to every [H, W] slice of ``field``."""
    if cfg.amplitude == 0.0:
        return field
    shape = tuple(field.shape[-2:])
    n_slices = int(np.prod(field.shape[:-2])) if field.ndim > 2 else 1
    noise = np.stack([perlin_noise(shape, cfg, rng) for _ in range(n_slices)]).reshape(field.shape)
    return field + torch.as_tensor(noise, dtype=field.dtype, device=field.device)


class NoiseSampler:
    """Owns the seeded generators for one training run; no hidden global state."""

    def __init__(self, cfg: NoiseConfig, seed: Optional[int] = None):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        self.generator = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)

    @property
    def active(self) -> bool:
        return self.cfg.kind != "none" and self.cfg.amplitude > 0.0

    def __call__(self, field: torch.Tensor) -> torch.Tensor:
        if self.cfg.kind == "gaussian":
            return gaussian_perturb(field, self.cfg, self.generator)
        if self.cfg.kind == "perlin":
            return perlin_perturb(field, self.cfg, self.rng)
        return field
