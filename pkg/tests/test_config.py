"""Pipeline configuration loading, validation, and dumping."""

import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from pillardet.config import ENV_CONFIG, ConfigError, PipelineConfig


def test_defaults_build_every_typed_view():
    cfg = PipelineConfig()
    assert cfg.grid_config().grid_shape == (128, 128)
    assert cfg.architecture_config().num_classes == 1
    assert cfg.nms_params().mode == "di-nms"
    assert cfg.augment_params().p_dropout == 0.25
    assert cfg.loss_weights().omega1 == 2.0
    assert cfg.eval_config().recall_positions == 40
    assert cfg.sensor_config().channels == 64
    assert cfg.scene_config(seed=5).rng_seed == 5


def test_unknown_section_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig({"nonsense": {}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig({"nms": {"not_a_key": 1.0}})


def test_bad_type_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig({"nms": {"iou_threshold": "high"}})
    with pytest.raises(ConfigError):
        PipelineConfig({"architecture": {"ta_dims": 64}})


def test_unknown_grid_preset_fails_at_construction():
    with pytest.raises(ConfigError):
        PipelineConfig({"grid": {"preset": "galactic"}})


def test_explicit_grid_overrides_preset():
    cfg = PipelineConfig({"grid": {"preset": "", "x_range": [0.0, 8.0],
                                   "y_range": [0.0, 8.0],
                                   "z_range": [-1.0, 3.0],
                                   "pillar_size": 1.0}})
    assert cfg.grid_config().grid_shape == (8, 8)


def test_load_from_file_and_env(tmp_path, monkeypatch):
    path = tmp_path / "cfg.toml"
    path.write_text('[nms]\nscore_threshold = 0.25\n')
    cfg = PipelineConfig.load(path)
    assert cfg.nms_params().score_threshold == 0.25
    monkeypatch.setenv(ENV_CONFIG, str(path))
    cfg2 = PipelineConfig.load()
    assert cfg2.nms_params().score_threshold == 0.25
    monkeypatch.delenv(ENV_CONFIG)
    assert PipelineConfig.load().nms_params().score_threshold == 0.3


def test_load_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[nms\nscore_threshold = ")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_dump_round_trips_through_toml():
    cfg = PipelineConfig({"architecture": {"pfn_out": 16}})
    text = cfg.dump()
    parsed = tomllib.loads(text)
    again = PipelineConfig(parsed)
    assert again.data == cfg.data
    assert again.data["architecture"]["pfn_out"] == 16
