from __future__ import annotations

import json

import pytest

from vidistill.config import ConfigError, PipelineConfig, config_hash, load_config, merge


def test_defaults_round_trip(tmp_path):
    cfg = PipelineConfig()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 7, "world": {"n_clips": 50}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.seed == 7 and cfg.world.n_clips == 50
    assert cfg.world.drop_rate == PipelineConfig().world.drop_rate


def test_unknown_key_is_rejected_with_path():
    with pytest.raises(ConfigError, match="world.n_clip"):
        merge(PipelineConfig(), {"world": {"n_clip": 3}})


def test_bad_enum_values():
    with pytest.raises(ConfigError):
        merge(PipelineConfig(), {"dual": {"caption_source": "web"}})
    with pytest.raises(ConfigError):
        merge(PipelineConfig(), {"precision": "float16"})
    with pytest.raises(ConfigError):
        merge(PipelineConfig(), {"adapt": {"order": "sideways"}})


def test_hash_ignores_output_dir_only():
    base = PipelineConfig()
    assert config_hash(base) == config_hash(merge(base, {"out": "elsewhere"}))
    assert config_hash(base) != config_hash(merge(base, {"seed": 1}))
