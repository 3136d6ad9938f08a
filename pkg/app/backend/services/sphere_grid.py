"""Grid geometry: quadrature weights, 3D coordinates, solar zenith, constant masks.

All functions are pure; returned arrays are marked read-only.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from app.backend.errors import GridError
from app.backend.schemas import ExtrasConfig, GridSpec
from config.settings import settings

logger = logging.getLogger(__name__)

MASK_NAMES = ("topography", "soil_type", "land_sea")
COORD_NAMES = ("coords_x", "coords_y", "coords_z")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def quadrature_weights(grid: GridSpec) -> np.ndarray:
    """Latitude weights cos(lat_i) normalised to mean one over the rows."""
    lats = grid.lat_array()
    cos = np.cos(np.deg2rad(lats))
    # cos(+-90 deg) is ~6e-17 in floating point; poles get exactly zero weight
    cos = np.where(np.isclose(np.abs(lats), 90.0, rtol=0.0, atol=1e-12), 0.0, cos)
    total = cos.mean()
    if not total > 0.0:
        raise GridError("quadrature weights are undefined: every latitude row is a pole")
    return _frozen(cos / total)


def sphere_coordinates(grid: GridSpec) -> np.ndarray:
    """Unit-sphere Cartesian coordinates, shape (3, H, W)."""
    lat = np.deg2rad(grid.lat_array())[:, None]
    lon = np.deg2rad(grid.lon_array())[None, :]
    x = np.cos(lat) * np.cos(lon)
    y = np.cos(lat) * np.sin(lon)
    z = np.broadcast_to(np.sin(lat), x.shape)
    return _frozen(np.stack([x, y, z]).astype(np.float64))


def point_coordinates(grid: GridSpec) -> np.ndarray:
    """Grid points as an (H*W, 3) array in row-major order."""
    return sphere_coordinates(grid).reshape(3, -1).T.copy()


def _as_utc(timestamp: datetime) -> datetime:
    if timestamp.tzinfo is None:
        return timestamp.replace(tzinfo=timezone.utc)
    return timestamp.astimezone(timezone.utc)


def solar_declination(timestamp: datetime) -> float:
    """Solar declination in radians (Spencer's Fourier series in the day angle)."""
    ts = _as_utc(timestamp)
    if not 1900 <= ts.year <= 2100:
        raise GridError(f"timestamp {ts.isoformat()} outside the supported range 1900-2100")
    hours = ts.hour + ts.minute / 60.0 + ts.second / 3600.0
    day_angle = 2.0 * np.pi * (ts.timetuple().tm_yday - 1 + hours / 24.0) / 365.0
    return float(
        0.006918
        - 0.399912 * np.cos(day_angle)
        + 0.070257 * np.sin(day_angle)
        - 0.006758 * np.cos(2.0 * day_angle)
        + 0.000907 * np.sin(2.0 * day_angle)
        - 0.002697 * np.cos(3.0 * day_angle)
        + 0.001480 * np.sin(3.0 * day_angle)
    )


def hour_angle(timestamp: datetime, lons_deg: np.ndarray) -> np.ndarray:
    """Hour angle in radians from UTC time and east-positive longitude."""
    ts = _as_utc(timestamp)
    utc_hours = ts.hour + ts.minute / 60.0 + ts.second / 3600.0 + ts.microsecond / 3.6e9
    return np.deg2rad(15.0 * (utc_hours - 12.0) + np.asarray(lons_deg, dtype=np.float64))


def cos_zenith(lats_deg: np.ndarray, declination: float, hour_angles: np.ndarray) -> np.ndarray:
    lat = np.deg2rad(np.asarray(lats_deg, dtype=np.float64))
    value = np.sin(lat) * np.sin(declination) + np.cos(lat) * np.cos(declination) * np.cos(hour_angles)
    return np.clip(value, -1.0, 1.0)


def solar_zenith_cos(grid: GridSpec, timestamp: datetime) -> np.ndarray:
    """cos of the solar zenith angle on the grid, shape (H, W)."""
    declination = solar_declination(timestamp)
    hours = hour_angle(timestamp, grid.lon_array())[None, :]
    return _frozen(cos_zenith(grid.lat_array()[:, None], declination, hours))


def zenith_stats(grid: GridSpec, timestamps: Sequence[datetime], max_samples: int = 256) -> tuple:
    """Mean/std of the zenith channel over (a deterministic subsample of) timestamps."""
    if not timestamps:
        raise GridError("zenith statistics need at least one timestamp")
    idx = np.unique(np.linspace(0, len(timestamps) - 1, min(max_samples, len(timestamps))).astype(int))
    fields = np.stack([solar_zenith_cos(grid, timestamps[i]) for i in idx])
    std = float(fields.std())
    return float(fields.mean()), max(std, settings.STD_EPSILON)


# ---------------------------------------------------------------------------
# Static channels


@dataclass(frozen=True)
class StaticField:
    name: str
    values: np.ndarray
    mean: float
    std: float
    standardize: bool = True

    def channel(self) -> np.ndarray:
        if not self.standardize:
            return self.values.astype(np.float32)
        return ((self.values - self.mean) / self.std).astype(np.float32)


@dataclass(frozen=True)
class StaticChannelSet:
    fields: Dict[str, StaticField] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.fields)

    def __len__(self) -> int:
        return len(self.fields)

    def __getitem__(self, name: str) -> StaticField:
        return self.fields[name]

    def stack(self) -> np.ndarray:
        """Channels in insertion order, shape (m, H, W), float32."""
        if not self.fields:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([f.channel() for f in self.fields.values()])

    def merged(self, other: "StaticChannelSet") -> "StaticChannelSet":
        return StaticChannelSet({**self.fields, **other.fields})


@dataclass(frozen=True)
class MaskRecipe:
    """Deterministic stand-in for real orography / soil / land-sea data."""

    seed: int = 0
    n_soil_types: int = 8


def _field_stats(name: str, values: np.ndarray) -> tuple:
    mean = float(values.mean())
    std = float(values.std())
    if std < settings.STD_EPSILON:
        logger.warning("Field %s has (near) zero variance; std guarded to %g", name, settings.STD_EPSILON)
        std = settings.STD_EPSILON
    return mean, std


def _smooth_sphere_field(coords: np.ndarray, rng: np.random.Generator, degree: int = 3) -> np.ndarray:
    """Random polynomial in (x, y, z): smooth everywhere, including the seam and poles."""
    x, y, z = coords
    out = np.zeros_like(x)
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            for k in range(degree + 1 - i - j):
                out = out + rng.normal() * x**i * y**j * z**k
    return out


def synthetic_masks(grid: GridSpec, recipe: MaskRecipe) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(recipe.seed)
    coords = sphere_coordinates(grid)
    relief = _smooth_sphere_field(coords, rng)
    relief = (relief - relief.mean()) / max(relief.std(), settings.STD_EPSILON)
    topography = np.where(relief > 0.0, 2000.0 * relief, 1000.0 * relief)
    land_sea = (topography > 0.0).astype(np.float64)
    soil = _smooth_sphere_field(coords, rng)
    edges = np.quantile(soil, np.linspace(0.0, 1.0, recipe.n_soil_types + 1)[1:-1])
    soil_type = (np.digitize(soil, edges) + 1).astype(np.float64) * land_sea
    return {"topography": topography, "soil_type": soil_type, "land_sea": land_sea}


def load_constant_masks(
    grid: GridSpec,
    source: Union[Path, str, MaskRecipe],
    names: Sequence[str] = MASK_NAMES,
) -> StaticChannelSet:
    """Load (or synthesise) constant masks and standardize each by its own stats."""
    if isinstance(source, MaskRecipe):
        raw = synthetic_masks(grid, source)
    else:
        from app.backend.storage import store

        raw = store.load_static(Path(source))
    out: Dict[str, StaticField] = {}
    for name in names:
        if name not in raw:
            raise GridError(f"mask '{name}' not found in source (available: {sorted(raw)})")
        values = np.asarray(raw[name], dtype=np.float64)
        if values.shape != grid.shape:
            raise GridError(f"mask '{name}' has shape {values.shape}, grid expects {grid.shape}")
        mean, std = _field_stats(name, values)
        out[name] = StaticField(name=name, values=_frozen(values.copy()), mean=mean, std=std)
    return StaticChannelSet(out)


def coordinate_channels(grid: GridSpec) -> StaticChannelSet:
    """x, y, z coordinates as static channels (kept on the unit sphere, not rescaled)."""
    coords = sphere_coordinates(grid)
    out = {}
    for name, values in zip(COORD_NAMES, coords):
        mean, std = _field_stats(name, values)
        out[name] = StaticField(name=name, values=values, mean=mean, std=std, standardize=False)
    return StaticChannelSet(out)


def build_static_channels(grid: GridSpec, extras: ExtrasConfig) -> StaticChannelSet:
    static = StaticChannelSet()
    if extras.coords:
        static = static.merged(coordinate_channels(grid))
    if extras.masks:
        source: Union[Path, MaskRecipe] = extras.mask_source or MaskRecipe(seed=extras.mask_seed)
        static = static.merged(load_constant_masks(grid, source, extras.masks))
    return static

