import pytest
import torch

from app.backend.errors import CheckpointError
from app.backend.models.unet import build_unet
from app.backend.schemas import UNetConfig
from app.backend.services.checkpoints import load_partial_checkpoint
from app.backend.storage import store


def _unet(in_channels=3, out_channels=2, seed=0, base_width=4):
    cfg = UNetConfig(n_blocks=2, base_width=base_width, in_channels=in_channels, out_channels=out_channels)
    return build_unet(cfg, seed=seed)


def test_identical_architecture_loads_everything(tmp_path):
    source = _unet(seed=1)
    path = store.save_checkpoint(source, tmp_path / "source.pt")
    target, report = load_partial_checkpoint(_unet(seed=2), path)
    assert report.reinitialized == []
    assert report.skipped == []
    assert sorted(report.loaded) == sorted(source.state_dict())
    for name, tensor in source.state_dict().items():
        assert torch.equal(target.state_dict()[name], tensor), name


def test_changed_input_channels_reinitializes_the_stem(tmp_path):
    source = _unet(in_channels=3, seed=1)
    path = store.save_checkpoint(source, tmp_path / "source.pt")
    target, report = load_partial_checkpoint(_unet(in_channels=5, seed=2), path)
    assert "stem.conv.weight" in report.reinitialized
    assert "stem.conv.weight" in report.skipped
    assert "stem.conv.bias" in report.loaded
    assert torch.equal(target.state_dict()["head.weight"], source.state_dict()["head.weight"])


def test_reinit_heads_lists_stem_and_head(tmp_path):
    source = _unet(seed=1)
    path = store.save_checkpoint(source, tmp_path / "source.pt")
    target, report = load_partial_checkpoint(_unet(seed=2), path, reinit_heads=True)
    heads = {"stem.conv.weight", "stem.conv.bias", "head.weight", "head.bias"}
    assert heads <= set(report.reinitialized)
    assert heads.isdisjoint(report.loaded)
    assert not torch.equal(target.state_dict()["head.weight"], source.state_dict()["head.weight"])


def test_corrupted_checkpoint_leaves_model_untouched(tmp_path):
    path = tmp_path / "broken.pt"
    path.write_bytes(b"not a checkpoint at all")
    model = _unet(seed=3)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    with pytest.raises(CheckpointError):
        load_partial_checkpoint(model, path)
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, before[name]), name


def test_no_matching_parameter(tmp_path):
    path = store.save_checkpoint(torch.nn.Linear(3, 3), tmp_path / "linear.pt")
    with pytest.raises(CheckpointError):
        load_partial_checkpoint(_unet(), path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_partial_checkpoint(_unet(), tmp_path / "absent.pt")


def test_in_memory_payload_is_accepted():
    source = _unet(seed=1)
    payload = {"parameters": {k: v.clone() for k, v in source.state_dict().items()}}
    _, report = load_partial_checkpoint(_unet(seed=2), payload)
    assert report.reinitialized == []
