"""Persistence for array containers and checkpoints.

A container is a directory with a ``manifest.yaml`` describing the array and
a ``data.bin`` holding raw little-endian float32 values in C order.
"""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from app.backend.errors import CheckpointError, DataError
from app.backend.schemas import ArrayManifest, ChannelSchema, GridSpec, NormalizationStats
from app.backend.services.dataset import WeatherSeries

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"
DATA_FILE = "data.bin"
CHECKPOINT_FORMAT = "wds-checkpoint"
CHECKPOINT_VERSION = 1
_DTYPE = np.dtype("<f4")


def _iso(ts: datetime) -> str:
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts.isoformat() + "Z"


def _parse_iso(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00")).astimezone(timezone.utc)


class ArrayStore:

    def write_manifest(self, path: Path, manifest: ArrayManifest) -> None:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / MANIFEST_FILE, "w") as fh:
            yaml.safe_dump(manifest.model_dump(mode="json", exclude_none=True), fh, sort_keys=False)

    def read_manifest(self, path: Path) -> ArrayManifest:
        manifest_path = Path(path) / MANIFEST_FILE
        if not manifest_path.exists():
            raise DataError(f"no {MANIFEST_FILE} in {path}")
        try:
            with open(manifest_path) as fh:
                raw = yaml.safe_load(fh)
            return ArrayManifest.model_validate(raw)
        except (yaml.YAMLError, ValidationError) as exc:
            raise DataError(f"invalid manifest {manifest_path}: {exc}") from exc

    def _write_array(self, path: Path, array: np.ndarray) -> None:
        np.ascontiguousarray(array, dtype=_DTYPE).tofile(path / DATA_FILE)

    def _read_array(self, path: Path, manifest: ArrayManifest) -> np.ndarray:
        data_path = Path(path) / DATA_FILE
        expected = int(np.prod(manifest.dims))
        values = np.fromfile(data_path, dtype=_DTYPE)
        if values.size != expected:
            raise DataError(f"{data_path} holds {values.size} values, manifest dims {manifest.dims} need {expected}")
        return values.reshape(manifest.dims).astype(np.float32)

    def save_series(self, series: WeatherSeries, path: Path, recipe: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        schema = series.schema
        manifest = ArrayManifest(
            kind="series",
            dims=list(series.data.shape),
            layout=["T", "C", "H", "W"],
            channels=list(schema.names),
            groups=list(schema.groups) if schema.groups is not None else None,
            lats=list(series.grid.lats),
            lons=list(series.grid.lons),
            timestamps=[_iso(t) for t in series.timestamps],
            normalization=NormalizationStats(mean=list(schema.means), std=list(schema.stds)),
            recipe=recipe,
        )
        self.write_manifest(path, manifest)
        self._write_array(path, series.data)
        logger.info("Saved series %s to %s", tuple(series.data.shape), path)
        return path

    def _grid(self, manifest: ArrayManifest) -> GridSpec:
        return GridSpec(lats=tuple(manifest.lats), lons=tuple(manifest.lons))

    def _schema(self, manifest: ArrayManifest) -> ChannelSchema:
        return ChannelSchema(
            names=tuple(manifest.channels),
            means=tuple(manifest.normalization.mean),
            stds=tuple(manifest.normalization.std),
            groups=tuple(manifest.groups) if manifest.groups is not None else None,
        )

    def load_series(self, path: Path) -> WeatherSeries:
        manifest = self.read_manifest(path)
        if manifest.kind != "series":
            raise DataError(f"{path} holds a '{manifest.kind}' container, expected 'series'")
        return WeatherSeries(
            grid=self._grid(manifest),
            schema=self._schema(manifest),
            timestamps=tuple(_parse_iso(t) for t in manifest.timestamps),
            data=self._read_array(path, manifest),
        )

    def read_timestep(self, path: Path, t: int) -> np.ndarray:
        """One [C, H, W] frame read through a memory map."""
        manifest = self.read_manifest(path)
        if manifest.kind != "series":
            raise DataError(f"{path} is not a series container")
        n_times = manifest.dims[0]
        if not 0 <= t < n_times:
            raise DataError(f"timestep {t} outside [0, {n_times})")
        frames = np.memmap(Path(path) / DATA_FILE, dtype=_DTYPE, mode="r", shape=tuple(manifest.dims))
        return np.array(frames[t], dtype=np.float32)

    def save_static(self, fields: Dict[str, np.ndarray], grid: GridSpec, path: Path) -> Path:
        path = Path(path)
        names: List[str] = list(fields)
        stack = np.stack([np.asarray(fields[n], dtype=np.float64) for n in names])
        manifest = ArrayManifest(
            kind="static",
            dims=list(stack.shape),
            layout=["C", "H", "W"],
            channels=names,
            lats=list(grid.lats),
            lons=list(grid.lons),
            normalization=NormalizationStats(
                mean=[float(v) for v in stack.mean(axis=(1, 2))],
                std=[float(v) for v in stack.std(axis=(1, 2))],
            ),
        )
        self.write_manifest(path, manifest)
        self._write_array(path, stack)
        return path

    def load_static(self, path: Path) -> Dict[str, np.ndarray]:
        manifest = self.read_manifest(path)
        if manifest.kind != "static":
            raise DataError(f"{path} holds a '{manifest.kind}' container, expected 'static'")
        stack = self._read_array(path, manifest)
        return {name: stack[i] for i, name in enumerate(manifest.channels)}

    # -----------------------------------------------------------------------
    # checkpoints

    def save_checkpoint(self, model: torch.nn.Module, path: Path, meta: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = {name: tensor.detach().cpu() for name, tensor in model.state_dict().items()}
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "parameters": state,
            "shapes": {name: list(t.shape) for name, t in state.items()},
            "meta": meta or {},
        }
        torch.save(payload, path)
        logger.info("Saved checkpoint with %d tensors to %s", len(state), path)
        return path

    def load_checkpoint(self, path: Path) -> Dict[str, Any]:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint {path} does not exist")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} container")
        parameters = payload.get("parameters")
        shapes = payload.get("shapes", {})
        if not isinstance(parameters, dict):
            raise CheckpointError(f"{path} has no parameter map")
        for name, tensor in parameters.items():
            if not isinstance(tensor, torch.Tensor):
                raise CheckpointError(f"entry {name} in {path} is not a tensor")
            if name in shapes and list(tensor.shape) != list(shapes[name]):
                raise CheckpointError(f"entry {name} in {path} disagrees with its recorded shape")
        return payload


store = ArrayStore()
