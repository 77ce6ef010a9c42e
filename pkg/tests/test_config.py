import json

import pytest

from model_based_fss.circuit import FrequencyGrid, Screen, Topology
from model_based_fss.config import ConfigError, RunConfig, load_run_config


def write_config(tmp_path, data) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults():
    config = load_run_config()
    assert config == RunConfig()
    assert config.sweep.grid == FrequencyGrid(6e9, 16e9, 201)
    assert config.topology == Topology.default()
    assert config.training.phase1_epochs == 2000
    assert config.compare.train_fraction == 0.8


def test_seed_and_progress_propagate():
    config = RunConfig(seed=7, progress=True)
    assert config.training.seed == config.direct.seed == config.compare.seed == 7
    assert config.training.progress and config.direct.progress
    assert config.sweep.seed == 0


def test_precedence(tmp_path):
    path = write_config(
        tmp_path,
        {"seed": 3, "training": {"phase1_epochs": 10, "phase2_lr": 1e-3}},
    )
    config = load_run_config(path)
    assert config.seed == 3
    assert config.training.phase1_epochs == 10
    assert config.training.phase2_lr == 1e-3
    assert config.training.phase2_epochs == 2000

    config = load_run_config(path, {"seed": 5, "training": {"phase1_epochs": 4}})
    assert config.seed == 5
    assert config.training.phase1_epochs == 4
    assert config.training.phase2_lr == 1e-3


def test_nested_sweep_and_topology(tmp_path):
    topology = Topology(screens=(Screen("series-lc"),), spacers=())
    path = write_config(
        tmp_path,
        {
            "sweep": {"slot_length": [14.75, 14.9, 2], "grid": {"n_points": 11}},
            "topology": topology.to_dict(),
        },
    )
    config = load_run_config(path)
    assert config.sweep.slot_length == (14.75, 14.9, 2)
    assert config.sweep.grid == FrequencyGrid(6e9, 16e9, 11)
    assert config.topology == topology


def test_round_trip():
    config = RunConfig(seed=2)
    assert RunConfig.from_dict(config.to_dict()) == config
    assert "seed" not in config.to_dict()["training"]


@pytest.mark.parametrize(
    "data",
    [
        {"sead": 1},
        {"training": {"phase1_epoch": 1}},
        {"sweep": {"grid": {"points": 3}}},
        {"training": 5},
        {"topology": {"screens": [{"kind": "parallel-lc"}], "spacers": [], "ports": 1}},
    ],
)
def test_unknown_keys(tmp_path, data):
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path, data))


@pytest.mark.parametrize(
    "data",
    [
        {"training": {"phase1_epochs": -1}},
        {"training": {"phase2_loss": "eq2"}},
        {"sweep": {"grid": {"n_points": 1}}},
        {"sweep": {"separation": [8.79, 10.3]}},
        {"compare": {"train_fraction": 1.5}},
        {"direct": {"dropout": 2}},
        {"topology": {"screens": [], "spacers": []}},
    ],
)
def test_invalid_values(tmp_path, data):
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path, data))


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.json"))
    path = tmp_path / "broken.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(str(path))
