import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Grid and channel layout


class GridSpec(BaseModel):
    """Regular lat-lon grid: latitudes north-to-south, longitudes east from 0."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lats: Tuple[float, ...]
    lons: Tuple[float, ...]

    @field_validator("lats")
    @classmethod
    def _check_lats(cls, lats: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(lats) < 1:
            raise ValueError("grid needs at least one latitude")
        arr = np.asarray(lats, dtype=np.float64)
        if np.any(np.abs(arr) > 90.0):
            raise ValueError("latitudes must lie in [-90, 90]")
        if np.any(np.diff(arr) >= 0.0):
            raise ValueError("latitudes must be strictly decreasing (north to south)")
        return lats

    @field_validator("lons")
    @classmethod
    def _check_lons(cls, lons: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(lons) < 1:
            raise ValueError("grid needs at least one longitude")
        arr = np.asarray(lons, dtype=np.float64)
        if np.any(arr < 0.0) or np.any(arr >= 360.0):
            raise ValueError("longitudes must lie in [0, 360)")
        spacing = 360.0 / len(lons)
        if not np.allclose(np.diff(arr), spacing, rtol=0.0, atol=1e-6):
            raise ValueError(f"longitudes must be equally spaced by 360/W = {spacing}")
        return lons

    @property
    def n_lat(self) -> int:
        return len(self.lats)

    @property
    def n_lon(self) -> int:
        return len(self.lons)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_lat, self.n_lon

    def lat_array(self) -> np.ndarray:
        return np.asarray(self.lats, dtype=np.float64)

    def lon_array(self) -> np.ndarray:
        return np.asarray(self.lons, dtype=np.float64)

    @classmethod
    def regular(cls, n_lat: int, n_lon: int, include_poles: bool = False) -> "GridSpec":
        """Equiangular grid; cell-centred rows unless ``include_poles`` (ERA5 layout)."""
        if n_lat < 1 or n_lon < 1:
            raise ValueError("grid dimensions must be positive")
        if include_poles:
            if n_lat < 2:
                raise ValueError("a grid with both poles needs at least two rows")
            lats = np.linspace(90.0, -90.0, n_lat)
        else:
            lats = 90.0 - (np.arange(n_lat) + 0.5) * 180.0 / n_lat
        lons = np.arange(n_lon) * 360.0 / n_lon
        return cls(lats=tuple(float(v) for v in lats), lons=tuple(float(v) for v in lons))

    def subsample(self, factor: int) -> "GridSpec":
        return GridSpec(lats=self.lats[::factor], lons=self.lons[::factor])


class ChannelGroup(StrictModel):
    kind: Literal["surface", "pressure", "other"] = "other"
    level: Optional[float] = None


PRESSURE_LEVELS = (50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000)
SURFACE_VARIABLES = ("u10", "v10", "t2m", "sp", "msl", "tcwv", "u100", "v100")
PRESSURE_VARIABLES = ("q", "t", "u", "v", "z")


class ChannelSchema(StrictModel):
    names: Tuple[str, ...]
    means: Tuple[float, ...]
    stds: Tuple[float, ...]
    groups: Optional[Tuple[ChannelGroup, ...]] = None

    @model_validator(mode="after")
    def _check(self) -> "ChannelSchema":
        if len(self.names) < 1:
            raise ValueError("a channel schema needs at least one channel")
        if len(set(self.names)) != len(self.names):
            raise ValueError("channel names must be unique")
        if not (len(self.means) == len(self.stds) == len(self.names)):
            raise ValueError("means/stds must have one entry per channel")
        if self.groups is not None and len(self.groups) != len(self.names):
            raise ValueError("groups must have one entry per channel")
        if any(not (s > 0.0) for s in self.stds):
            raise ValueError("channel stds must be positive")
        return self

    @property
    def n_channels(self) -> int:
        return len(self.names)

    def _stats(self, like: Any) -> Tuple[Any, Any]:
        mean = np.asarray(self.means, dtype=np.float64).reshape(-1, 1, 1)
        std = np.asarray(self.stds, dtype=np.float64).reshape(-1, 1, 1)
        if hasattr(like, "new_tensor"):
            return like.new_tensor(mean), like.new_tensor(std)
        return mean, std

    def normalize(self, x: Any) -> Any:
        """Standardize an array whose channel axis is third from last."""
        mean, std = self._stats(x)
        out = (x - mean) / std
        return out.astype(x.dtype) if isinstance(x, np.ndarray) else out

    def denormalize(self, x: Any) -> Any:
        mean, std = self._stats(x)
        out = x * std + mean
        return out.astype(x.dtype) if isinstance(x, np.ndarray) else out

    def with_stats(self, means: Any, stds: Any) -> "ChannelSchema":
        return ChannelSchema(
            names=self.names,
            means=tuple(float(v) for v in means),
            stds=tuple(float(v) for v in stds),
            groups=self.groups,
        )

    @classmethod
    def default(cls, n_channels: int) -> "ChannelSchema":
        return cls(
            names=tuple(f"var{c}" for c in range(n_channels)),
            means=(0.0,) * n_channels,
            stds=(1.0,) * n_channels,
        )

    @classmethod
    def full_scale(cls) -> "ChannelSchema":
        """73-channel reanalysis layout: 8 surface fields + 5 variables on 13 levels."""
        names: List[str] = list(SURFACE_VARIABLES)
        groups = [ChannelGroup(kind="surface") for _ in SURFACE_VARIABLES]
        for var in PRESSURE_VARIABLES:
            for level in PRESSURE_LEVELS:
                names.append(f"{var}{level}")
                groups.append(ChannelGroup(kind="pressure", level=float(level)))
        n = len(names)
        return cls(names=tuple(names), means=(0.0,) * n, stds=(1.0,) * n, groups=tuple(groups))


# ---------------------------------------------------------------------------
# Experiment configuration


MaskName = Literal["topography", "soil_type", "land_sea"]


class PaddingScheme(StrictModel):
    x_mode: Literal["zero", "circular"] = "zero"
    y_mode: Literal["zero", "reflect"] = "zero"


class UNetConfig(StrictModel):
    n_blocks: int = Field(4, ge=2, le=5)
    base_width: int = Field(64, ge=1)
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    padding: PaddingScheme = PaddingScheme()
    skip_connections: bool = True

    @property
    def downsampling_factor(self) -> int:
        return 2 ** (self.n_blocks - 1)

    def widths(self) -> List[int]:
        return [self.base_width * 2**stage for stage in range(self.n_blocks)]


class GraphUNetConfig(StrictModel):
    core: UNetConfig
    n_layers: Literal[2] = 2
    k: int = Field(4, ge=1)
    kernel_width: int = Field(64, ge=1)
    latent_channels: int = Field(32, ge=1)
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)


class GraphSettings(StrictModel):
    k: int = Field(4, ge=1)
    kernel_width: int = Field(64, ge=1)
    latent_channels: int = Field(32, ge=1)


class ModelConfig(StrictModel):
    name: str = "unet"
    n_blocks: int = Field(4, ge=2, le=5)
    base_width: int = Field(64, ge=1)
    padding: PaddingScheme = PaddingScheme()
    skip_connections: bool = True
    graph: GraphSettings = GraphSettings()

    def unet(self, in_channels: int, out_channels: int, skip_connections: Optional[bool] = None) -> UNetConfig:
        return UNetConfig(
            n_blocks=self.n_blocks,
            base_width=self.base_width,
            in_channels=in_channels,
            out_channels=out_channels,
            padding=self.padding,
            skip_connections=self.skip_connections if skip_connections is None else skip_connections,
        )

    def graph_unet(self, in_channels: int, out_channels: int, skip_connections: Optional[bool] = None) -> GraphUNetConfig:
        core = self.unet(self.graph.latent_channels, self.graph.latent_channels, skip_connections)
        return GraphUNetConfig(
            core=core,
            k=self.graph.k,
            kernel_width=self.graph.kernel_width,
            latent_channels=self.graph.latent_channels,
            in_channels=in_channels,
            out_channels=out_channels,
        )


class ExtrasConfig(StrictModel):
    zenith: bool
    coords: bool
    masks: List[MaskName] = []
    mask_source: Optional[Path] = None
    mask_seed: int = 0
    zenith_standardize: bool = True

    @field_validator("masks")
    @classmethod
    def _unique_masks(cls, masks: List[str]) -> List[str]:
        if len(set(masks)) != len(masks):
            raise ValueError("masks must not repeat")
        return masks

    @property
    def n_static(self) -> int:
        return (3 if self.coords else 0) + len(self.masks)


class NoiseConfig(StrictModel):
    kind: Literal["none", "gaussian", "perlin"] = "none"
    amplitude: float = Field(0.1, ge=0.0)
    lattice: Tuple[int, int] = (8, 16)
    octaves: int = Field(3, ge=1)
    persistence: float = Field(0.5, gt=0.0, le=1.0)
    seed: int = 0


class LossConfig(StrictModel):
    kind: Literal["mse", "l1", "huber", "geo_mse", "geo_l1", "l1_l2"]
    huber_delta: float = Field(1.0, gt=0.0)
    l1_weight: float = Field(0.05, ge=0.0, le=1.0)
    l2_weight: float = Field(0.95, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _weights_sum_to_one(self) -> "LossConfig":
        if abs(self.l1_weight + self.l2_weight - 1.0) > 1e-12:
            raise ValueError("l1_weight + l2_weight must equal 1")
        return self

    @property
    def geometric(self) -> bool:
        return self.kind.startswith("geo_")


class ForecastConfig(StrictModel):
    formulation: Literal["direct", "delta"]
    n_input_steps: int = Field(1, ge=1)
    horizon_steps: int = Field(1, ge=1)
    input_stride: int = Field(1, ge=1)
    extras: ExtrasConfig
    noise: NoiseConfig = NoiseConfig()
    loss: LossConfig

    @model_validator(mode="after")
    def _window_slides(self) -> "ForecastConfig":
        # a rollout appends each prediction to the input window
        if self.n_input_steps > 1 and self.input_stride != self.horizon_steps:
            raise ValueError("with several input steps, input_stride must equal horizon_steps")
        return self


class OptimConfig(StrictModel):
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(4, ge=1)
    effective_batch_size: Optional[int] = Field(None, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def _check_accumulation(self) -> "OptimConfig":
        if self.effective_batch_size is not None and self.effective_batch_size % self.batch_size:
            raise ValueError("effective_batch_size must be a multiple of batch_size")
        return self

    @property
    def accumulation_steps(self) -> int:
        if self.effective_batch_size is None:
            return 1
        return self.effective_batch_size // self.batch_size


class PretrainConfig(StrictModel):
    objective: Literal["supervised", "autoencoder", "masked_autoencoder", "denoising_autoencoder"] = "supervised"
    mask_ratio: float = Field(0.5, gt=0.0, lt=1.0)
    dae_noise_std: float = Field(0.1, ge=0.0)
    skip_connections: Literal["auto", "keep", "remove"] = "auto"
    epochs: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_skips(self) -> "PretrainConfig":
        if self.objective == "autoencoder" and self.skip_connections == "keep":
            raise ValueError("the autoencoder objective requires skip connections removed")
        if self.objective == "denoising_autoencoder" and self.skip_connections == "remove":
            raise ValueError("the denoising objective keeps skip connections")
        return self

    @property
    def use_skip_connections(self) -> bool:
        if self.skip_connections == "auto":
            return self.objective != "autoencoder"
        return self.skip_connections == "keep"


class FinetuneConfig(StrictModel):
    stages: List[int] = [2, 3, 4]
    supervision: Literal["last_step", "intermediate"] = "last_step"
    gamma: float = Field(0.9, gt=0.0, le=1.0)
    scheduled_sampling: bool = False
    epochs_per_stage: int = Field(1, ge=1)
    lr: Optional[float] = Field(None, gt=0.0)

    @field_validator("stages")
    @classmethod
    def _check_stages(cls, stages: List[int]) -> List[int]:
        if not stages:
            raise ValueError("at least one fine-tuning stage is required")
        if any(s < 1 for s in stages):
            raise ValueError("stage rollout lengths must be >= 1")
        if any(b < a for a, b in zip(stages, stages[1:])):
            raise ValueError("stage rollout lengths must be nondecreasing")
        return stages

    @model_validator(mode="after")
    def _check_sampling(self) -> "FinetuneConfig":
        if self.scheduled_sampling and self.supervision != "intermediate":
            raise ValueError("scheduled sampling is only defined for intermediate supervision")
        return self


class SyntheticRecipe(StrictModel):
    kind: str
    n_lat: int = Field(16, ge=1)
    n_lon: int = Field(32, ge=1)
    n_times: int = Field(64, ge=1)
    n_channels: int = Field(4, ge=1)
    dt_hours: float = Field(6.0, gt=0.0)
    seed: int = 0
    start: datetime = datetime(2018, 1, 1, tzinfo=timezone.utc)
    include_poles: bool = False
    n_modes: int = Field(3, ge=1)
    shift_columns: float = 1.0
    persistence: float = Field(0.98, ge=0.0, le=1.0)
    noise_std: float = Field(0.05, ge=0.0)
    diffusivity: float = Field(0.02, ge=0.0)
    wave_speed: float = 0.5


class DatasetSource(StrictModel):
    path: Optional[Path] = None
    synthetic: Optional[SyntheticRecipe] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "DatasetSource":
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("dataset needs exactly one of 'path' or 'synthetic'")
        return self


class NormalizationConfig(StrictModel):
    stats: Literal["entire", "train"] = "entire"


class SplitConfig(StrictModel):
    fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)

    @field_validator("fractions")
    @classmethod
    def _check_fractions(cls, fractions: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f < 0.0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be nonnegative and sum to 1")
        return fractions


class EvaluationConfig(StrictModel):
    horizons: List[int] = [1, 2, 4]
    max_initial_conditions: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(8, ge=1)
    climatology: bool = False

    @field_validator("horizons")
    @classmethod
    def _check_horizons(cls, horizons: List[int]) -> List[int]:
        if not horizons or any(h < 1 for h in horizons):
            raise ValueError("horizons must be a non-empty list of positive step counts")
        return sorted(set(horizons))


NON_SEMANTIC_FIELDS = {"run_id", "label"}


class ExperimentConfig(StrictModel):
    run_id: str = Field(..., pattern=r"^[A-Za-z0-9_.=-]+$")
    label: Optional[str] = None
    seed: int = 0
    dataset: DatasetSource
    normalization: NormalizationConfig = NormalizationConfig()
    split: SplitConfig = SplitConfig()
    model: ModelConfig = ModelConfig()
    forecast: ForecastConfig
    optim: OptimConfig = OptimConfig()
    pretrain: Optional[PretrainConfig] = None
    finetune: Optional[FinetuneConfig] = None
    evaluation: EvaluationConfig = EvaluationConfig()

    @property
    def axis_label(self) -> str:
        return self.label or self.run_id

    def canonical_json(self) -> str:
        payload = self.model_dump(mode="json", exclude=NON_SEMANTIC_FIELDS)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Containers and reports


class NormalizationStats(StrictModel):
    mean: List[float]
    std: List[float]


class ArrayManifest(StrictModel):
    """Manifest of an on-disk array container (dataset or static masks)."""

    format: Literal["wds-array"] = "wds-array"
    version: int = 1
    kind: Literal["series", "static"]
    dims: List[int]
    layout: List[str]
    dtype: Literal["<f4"] = "<f4"
    order: Literal["C"] = "C"
    channels: List[str]
    groups: Optional[List[ChannelGroup]] = None
    lats: List[float]
    lons: List[float]
    timestamps: List[str] = []
    normalization: NormalizationStats
    recipe: Optional[Dict[str, Any]] = None

    @model_validator(mode="after")
    def _check_dims(self) -> "ArrayManifest":
        expected = ["T", "C", "H", "W"] if self.kind == "series" else ["C", "H", "W"]
        if self.layout != expected:
            raise ValueError(f"{self.kind} layout must be {expected}")
        if len(self.dims) != len(expected):
            raise ValueError(f"dims must have {len(expected)} entries")
        n_channels, n_lat, n_lon = self.dims[-3:]
        if len(self.channels) != n_channels:
            raise ValueError("channel names do not match dims")
        if len(self.lats) != n_lat or len(self.lons) != n_lon:
            raise ValueError("lat/lon vectors do not match dims")
        if self.kind == "series" and len(self.timestamps) != self.dims[0]:
            raise ValueError("timestamps do not match dims")
        return self


class MetricReport(StrictModel):
    horizon_steps: int
    channels: List[str]
    rmse: List[float]
    acc: List[Optional[float]]
    rmse_mean: float
    acc_mean: Optional[float]

    @model_validator(mode="after")
    def _check_ranges(self) -> "MetricReport":
        if any(r < 0.0 for r in self.rmse):
            raise ValueError("rmse must be nonnegative")
        if any(a is not None and not (-1.0 <= a <= 1.0) for a in self.acc):
            raise ValueError("acc must lie in [-1, 1]")
        return self

    def to_rows(self, run_id: str) -> List[Dict[str, Any]]:
        rows = [
            {"run_id": run_id, "horizon_steps": self.horizon_steps, "channel": name, "acc": acc, "rmse": rmse}
            for name, acc, rmse in zip(self.channels, self.acc, self.rmse)
        ]
        rows.append({
            "run_id": run_id,
            "horizon_steps": self.horizon_steps,
            "channel": "MEAN",
            "acc": self.acc_mean,
            "rmse": self.rmse_mean,
        })
        return rows


METRIC_COLUMNS = ["run_id", "horizon_steps", "channel", "acc", "rmse"]
RESULT_COLUMNS = ["run_id", "label", "horizon_steps", "metric", "channel", "value"]


class ResultRow(StrictModel):
    run_id: str
    label: str
    horizon_steps: int
    metric: Literal["acc", "rmse"]
    value: Optional[float]
    channel: str


class LoadReport(StrictModel):
    loaded: List[str] = []
    reinitialized: List[str] = []
    skipped: List[str] = []

    def to_text(self) -> str:
        lines = [f"loaded: {len(self.loaded)}", f"reinitialized: {len(self.reinitialized)}", f"skipped: {len(self.skipped)}"]
        for section in ("loaded", "reinitialized", "skipped"):
            lines.append("")
            lines.append(f"[{section}]")
            lines.extend(getattr(self, section))
        return "\n".join(lines) + "\n"


class RunStatus(StrictModel):
    state: Literal["running", "complete", "failed"]
    phase: Optional[str] = None
    error_category: Optional[str] = None
    error: Optional[str] = None
    partial: bool = False
    config_hash: Optional[str] = None
