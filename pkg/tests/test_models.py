import pytest
import torch
from torch import nn

from app.backend.errors import ConfigError, ShapeError
from app.backend.models.graph_unet import build_graph_unet, nearest_neighbors
from app.backend.models.padding import pad2d
from app.backend.models.registry import (
    build_model,
    conv_weight_count,
    count_parameters,
    head_parameter_names,
    register_model,
)
from app.backend.models.unet import UNet, build_unet
from app.backend.schemas import GraphSettings, GridSpec, ModelConfig, PaddingScheme, UNetConfig
from app.backend.services.sphere_grid import point_coordinates

CIRCULAR = PaddingScheme(x_mode="circular", y_mode="zero")
ZERO = PaddingScheme(x_mode="zero", y_mode="zero")


def _unet_cfg(n_blocks=3, base_width=4, in_channels=3, out_channels=2, padding=CIRCULAR, skip=True):
    return UNetConfig(
        n_blocks=n_blocks,
        base_width=base_width,
        in_channels=in_channels,
        out_channels=out_channels,
        padding=padding,
        skip_connections=skip,
    )


def test_circular_padding_wraps_columns():
    x = torch.tensor([[[[1.0, 2.0, 3.0]]]])
    out = pad2d(x, CIRCULAR, (0, 1))
    assert out.flatten().tolist() == [3.0, 1.0, 2.0, 3.0, 1.0]


def test_reflect_padding_mirrors_rows():
    x = torch.tensor([[[[0.0], [1.0], [2.0]]]])
    out = pad2d(x, PaddingScheme(x_mode="zero", y_mode="reflect"), (1, 0))
    assert out.flatten().tolist() == [1.0, 0.0, 1.0, 2.0, 1.0]


def test_zero_padding_border():
    x = torch.ones(1, 1, 3, 4)
    out = pad2d(x, ZERO, (1, 1))
    assert out.shape == (1, 1, 5, 6)
    assert out[..., 1:-1, 1:-1].eq(1.0).all()
    border = out.clone()
    border[..., 1:-1, 1:-1] = 0.0
    assert border.eq(0.0).all()


def test_padding_larger_than_field():
    with pytest.raises(ShapeError):
        pad2d(torch.zeros(1, 1, 2, 4), CIRCULAR, (0, 4))


def test_unet_shape_contract():
    model = build_unet(_unet_cfg(in_channels=7, out_channels=3), seed=0)
    out = model(torch.randn(2, 7, 8, 16))
    assert out.shape == (2, 3, 8, 16)


def test_unet_rejects_wrong_channels():
    model = build_unet(_unet_cfg(in_channels=7), seed=0)
    with pytest.raises(ShapeError):
        model(torch.randn(1, 8, 8, 16))


def test_unet_divisibility_error_names_factor():
    model = build_unet(_unet_cfg(n_blocks=4), seed=0)
    with pytest.raises(ShapeError, match="8"):
        model(torch.randn(1, 3, 12, 16))


def test_unet_seeded_builds_match():
    a = build_unet(_unet_cfg(), seed=42)
    b = build_unet(_unet_cfg(), seed=42)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name


def test_unet_without_skips_builds_and_runs():
    model = build_unet(_unet_cfg(skip=False), seed=0)
    assert model(torch.randn(1, 3, 8, 16)).shape == (1, 2, 8, 16)


def test_unet_shift_equivariance_with_circular_padding():
    torch.manual_seed(0)
    model = build_unet(_unet_cfg(n_blocks=4, padding=CIRCULAR), seed=1).double().eval()
    x = torch.randn(1, 3, 16, 32, dtype=torch.float64)
    with torch.no_grad():
        shifted = model(torch.roll(x, 8, dims=-1))
        expected = torch.roll(model(x), 8, dims=-1)
    assert (shifted - expected).abs().max().item() < 1e-5


def test_unet_zero_padding_breaks_equivariance():
    model = build_unet(_unet_cfg(n_blocks=4, padding=ZERO), seed=1).double().eval()
    x = torch.randn(1, 3, 16, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        shifted = model(torch.roll(x, 8, dims=-1))
        expected = torch.roll(model(x), 8, dims=-1)
    assert (shifted - expected).abs().max().item() >= 1e-2


def test_width_doubling_quadruples_conv_weights():
    with torch.device("meta"):
        narrow = UNet(_unet_cfg(n_blocks=4, base_width=64, in_channels=147, out_channels=73))
        wide = UNet(_unet_cfg(n_blocks=4, base_width=128, in_channels=147, out_channels=73))
    ratio = conv_weight_count(wide) / conv_weight_count(narrow)
    assert abs(ratio - 4.0) / 4.0 < 0.05


def _conv3(i, o):
    return 9 * i * o + o


def _double(i, o):
    return _conv3(i, o) + 2 * o + _conv3(o, o) + 2 * o


def test_unet_parameter_count_matches_layer_formula():
    cfg = _unet_cfg(n_blocks=4, base_width=8, in_channels=11, out_channels=5)
    w = cfg.widths()
    expected = _conv3(11, w[0]) + _double(w[0], w[0])
    for s in range(1, 4):
        expected += _conv3(w[s - 1], w[s]) + _double(w[s], w[s])
        expected += 4 * w[s] * w[s - 1] + w[s - 1] + _double(2 * w[s - 1], w[s - 1])
    expected += w[0] * 5 + 5
    assert count_parameters(UNet(cfg)) == expected


def test_count_parameters_linear():
    assert count_parameters(nn.Linear(3, 5)) == 20


def test_nearest_neighbors_ignore_source_order():
    grid = GridSpec.regular(4, 8)
    xyz = torch.as_tensor(point_coordinates(grid))
    perm = torch.randperm(xyz.shape[0], generator=torch.Generator().manual_seed(0))
    direct = nearest_neighbors(xyz, xyz, 4)
    permuted = nearest_neighbors(xyz[perm], xyz, 4)
    assert torch.equal(torch.sort(direct, dim=1).values, torch.sort(perm[permuted], dim=1).values)
    assert torch.equal(direct[:, 0], torch.arange(xyz.shape[0]))


def test_nearest_neighbors_k_too_large():
    xyz = torch.as_tensor(point_coordinates(GridSpec.regular(2, 2)))
    with pytest.raises(ShapeError):
        nearest_neighbors(xyz, xyz, 5)


def _graph_model(grid):
    cfg = ModelConfig(name="graph_unet", n_blocks=2, base_width=4, graph=GraphSettings(k=4, kernel_width=8, latent_channels=4))
    return build_model(cfg, 5, 3, grid, seed=0)


def test_graph_unet_shape_contract():
    grid = GridSpec.regular(4, 8)
    model = _graph_model(grid)
    assert model(torch.randn(2, 5, 4, 8)).shape == (2, 3, 4, 8)


def test_graph_unet_queries_other_points():
    grid = GridSpec.regular(4, 8)
    model = _graph_model(grid)
    finer = torch.as_tensor(point_coordinates(GridSpec.regular(8, 16)), dtype=torch.float32)
    inputs = torch.as_tensor(point_coordinates(grid), dtype=torch.float32)
    out = model.forward_points(torch.randn(1, inputs.shape[0], 5), inputs, finer)
    assert out.shape == (1, 128, 3)


def _smooth_features(grid, n_channels=5):
    lat = torch.deg2rad(torch.as_tensor(grid.lat_array()))[:, None]
    lon = torch.deg2rad(torch.as_tensor(grid.lon_array()))[None, :]
    base = torch.cos(lat) * torch.cos(lon) + 0.5 * torch.sin(lat)
    fields = torch.stack([base * (c + 1) for c in range(n_channels)])
    return fields.flatten(1).T.unsqueeze(0).to(torch.float32)


def test_graph_unet_encoder_ignores_point_order():
    grid = GridSpec.regular(6, 8)
    model = _graph_model(grid).eval()
    xyz = torch.as_tensor(point_coordinates(grid), dtype=torch.float32)
    features = torch.randn(2, xyz.shape[0], 5, generator=torch.Generator().manual_seed(3))
    perm = torch.randperm(xyz.shape[0], generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        direct = model.encode(features, xyz)
        permuted = model.encode(features[:, perm], xyz[perm])
    assert (direct - permuted).abs().max().item() < 1e-5


def test_graph_unet_coarse_queries_match_fine_restriction():
    grid = GridSpec.regular(8, 16)
    coarse = grid.subsample(2)
    assert coarse.shape == (4, 8)
    model = _graph_model(grid).eval()
    xyz = torch.as_tensor(point_coordinates(grid), dtype=torch.float32)
    coarse_xyz = torch.as_tensor(point_coordinates(coarse), dtype=torch.float32)
    features = _smooth_features(grid)
    with torch.no_grad():
        latent = model.core(model.encode(features, xyz))
        fine = model.decode(latent, xyz).reshape(1, *grid.shape, -1)
        direct = model.decode(latent, coarse_xyz).reshape(1, *coarse.shape, -1)
    # each query only sees its own neighborhood on the latent grid
    assert (fine[:, ::2, ::2] - direct).abs().max().item() < 1e-5


def test_graph_unet_needs_coordinates():
    grid = GridSpec.regular(4, 8)
    model = _graph_model(grid)
    with pytest.raises(ShapeError):
        model.forward_points(torch.randn(1, 32, 5), None, None)


def test_graph_unet_k_too_large():
    cfg = ModelConfig(name="graph_unet", n_blocks=2, base_width=4, graph=GraphSettings(k=64, kernel_width=8, latent_channels=4))
    with pytest.raises(ShapeError):
        build_model(cfg, 5, 3, GridSpec.regular(4, 8))


def test_head_parameter_names():
    model = build_unet(_unet_cfg(), seed=0)
    assert head_parameter_names(model) == ["stem.conv.weight", "stem.conv.bias", "head.weight", "head.bias"]


def test_registry_rejects_unknown_and_duplicate_names():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(name="segformer"), 3, 3, GridSpec.regular(8, 16))
    with pytest.raises(ConfigError):
        register_model("unet", lambda *args: nn.Identity())
