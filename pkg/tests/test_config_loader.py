import pytest

from path_rwkv.utils.config_loader import RunConfig, build_run_config, env_overrides, load_settings
from path_rwkv.utils.errors import ConfigError


def test_packaged_defaults_match_dataclass():
    assert RunConfig.from_mapping(load_settings()) == RunConfig()
    config = build_run_config(environ={})
    assert (config.epochs, config.base_lr, config.max_n_tiles, config.batch_size) == (100, 1e-4, 2000, 4)


def test_layering_order(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("epochs: 7\nbag_size: 64\nseed: 3\n")
    config = build_run_config(str(path), {"bag_size": 32, "seed": None}, {"PATHRWKV_EPOCHS": "9"})
    assert config.epochs == 9
    assert config.bag_size == 32
    assert config.seed == 3


def test_coercion():
    config = RunConfig.from_mapping({"use_pe": "false", "grid": "1000,2000", "tasks": "neoplasia,tier"})
    assert config.use_pe is False
    assert config.grid == [1000, 2000]
    assert config.tasks == ["neoplasia", "tier"]


@pytest.mark.parametrize("values", [
    {"n_slides": 0},
    {"mode": "streaming"},
    {"bag_size": "many"},
    {"warmup_epochs": -1},
    {"train_fraction": 0.9, "val_fraction": 0.1},
    {"colour": "blue"},
])
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(values)


def test_unknown_env_key_rejected():
    assert env_overrides({"PATHRWKV_SEED": "4", "HOME": "/root"}) == {"seed": "4"}
    with pytest.raises(ConfigError):
        build_run_config(environ={"PATHRWKV_SPEED": "1"})


def test_hash_ignores_key_order():
    a = RunConfig.from_mapping({"seed": 1, "epochs": 2})
    b = RunConfig.from_mapping({"epochs": 2, "seed": 1})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != RunConfig().config_hash()


def test_missing_settings_file(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(str(tmp_path / "nope.yaml"))
