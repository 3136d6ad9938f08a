import copy

import pytest
import yaml

from app.backend.v1 import cli
from config.settings import settings


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(cli, "setup_logging", lambda level=None: None)


@pytest.fixture
def config_file(minimal_raw, tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(minimal_raw))
    return path


def test_run_then_rerun(config_file, capsys):
    assert cli.main(["run", "--config", str(config_file)]) == 0
    assert (settings.RUNS_DIR / "tiny" / "metrics.csv").exists()
    capsys.readouterr()

    assert cli.main(["run", "--config", str(config_file)]) == 2
    assert capsys.readouterr().err.startswith("error[run_exists]:")


def test_invalid_config(minimal_raw, tmp_path, capsys):
    raw = copy.deepcopy(minimal_raw)
    raw["optim"]["lr"] = -1.0
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert cli.main(["run", "--config", str(path)]) == 2
    assert capsys.readouterr().err.startswith("error[config]:")
    assert not (settings.RUNS_DIR / "tiny").exists()


def test_evaluate_without_a_run(config_file, capsys):
    assert cli.main(["evaluate", "--config", str(config_file)]) == 2
    assert capsys.readouterr().err.startswith("error[data]:")


def test_generate_data_from_flags(tmp_path, capsys):
    out = tmp_path / "generated"
    args = ["generate-data", "--kind", "persistence_plus_noise", "--n-lat", "4", "--n-lon", "8", "--n-times", "6", "--out", str(out)]
    assert cli.main(args) == 0
    assert (out / "manifest.yaml").exists()
    assert cli.main(args) == 2
    assert "error[run_exists]" in capsys.readouterr().err
    assert cli.main(args + ["--force"]) == 0


def test_generate_data_from_config(config_file):
    assert cli.main(["generate-data", "--config", str(config_file)]) == 0
    assert (settings.DATA_DIR / "solid_rotation_advection" / "manifest.yaml").exists()


def test_count_params(config_file, capsys):
    assert cli.main(["count-params", "--config", str(config_file)]) == 0
    assert "unet_5_blocks_128" in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["bogus"])
