import numpy as np
import pytest
import torch
import yaml

from app.backend.errors import CheckpointError, DataError
from app.backend.storage import DATA_FILE, MANIFEST_FILE, store


def test_series_round_trip(rotation_series, tmp_path):
    path = store.save_series(rotation_series, tmp_path / "series", recipe={"kind": "solid_rotation_advection"})
    loaded = store.load_series(path)
    np.testing.assert_array_equal(loaded.data, rotation_series.data)
    assert loaded.timestamps == rotation_series.timestamps
    assert loaded.schema == rotation_series.schema
    assert loaded.grid == rotation_series.grid
    assert store.read_manifest(path).recipe == {"kind": "solid_rotation_advection"}


def test_read_timestep(rotation_series, tmp_path):
    path = store.save_series(rotation_series, tmp_path / "series")
    np.testing.assert_array_equal(store.read_timestep(path, 5), rotation_series.data[5])
    with pytest.raises(DataError):
        store.read_timestep(path, rotation_series.n_times)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        store.load_series(tmp_path)


def test_invalid_manifest(rotation_series, tmp_path):
    path = store.save_series(rotation_series, tmp_path / "series")
    (path / MANIFEST_FILE).write_text("kind: series\ndims: not-a-list\n")
    with pytest.raises(DataError):
        store.load_series(path)


def test_truncated_data_file(rotation_series, tmp_path):
    path = store.save_series(rotation_series, tmp_path / "series")
    raw = (path / DATA_FILE).read_bytes()
    (path / DATA_FILE).write_bytes(raw[:-16])
    with pytest.raises(DataError, match="values"):
        store.load_series(path)


def test_manifest_is_plain_yaml(rotation_series, tmp_path):
    path = store.save_series(rotation_series, tmp_path / "series")
    with open(path / MANIFEST_FILE) as fh:
        manifest = yaml.safe_load(fh)
    assert manifest["dims"] == list(rotation_series.data.shape)
    assert manifest["layout"] == ["T", "C", "H", "W"]
    assert manifest["timestamps"][0].endswith("Z")


def test_static_round_trip(grid, tmp_path):
    fields = {"land_sea": np.ones(grid.shape), "orography": np.arange(np.prod(grid.shape), dtype=float).reshape(grid.shape)}
    path = store.save_static(fields, grid, tmp_path / "static")
    loaded = store.load_static(path)
    assert list(loaded) == ["land_sea", "orography"]
    np.testing.assert_allclose(loaded["orography"], fields["orography"])
    with pytest.raises(DataError):
        store.load_series(path)


def test_checkpoint_round_trip(tmp_path):
    layer = torch.nn.Linear(3, 2)
    path = store.save_checkpoint(layer, tmp_path / "ckpt" / "model.pt", meta={"phase": "train"})
    payload = store.load_checkpoint(path)
    assert payload["meta"] == {"phase": "train"}
    assert torch.equal(payload["parameters"]["weight"], layer.weight.detach())


def test_foreign_file_is_not_a_checkpoint(tmp_path):
    path = tmp_path / "plain.pt"
    torch.save({"weight": torch.zeros(2)}, path)
    with pytest.raises(CheckpointError):
        store.load_checkpoint(path)
