#!/usr/bin/env python3
"""
Tests for configuration lookup, merging and validation
"""

import pytest
import yaml

from densepose_kit.config import (
    CONFIG_ENV,
    DEFAULT_CONFIG,
    RunConfig,
    config_paths,
    load_config,
    merge_config,
    save_config,
)
from densepose_kit.errors import ConfigError, InvalidConfig, ParseError


@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.setenv("HOME", str(tmp_path))
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    return tmp_path


def write_yaml(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data))
    return path


def test_lookup_order(home, monkeypatch):
    env = home / "env.yaml"
    monkeypatch.setenv(CONFIG_ENV, str(env))
    paths = config_paths("explicit.yaml")
    assert [p.name for p in paths[:2]] == ["explicit.yaml", "env.yaml"]
    assert paths[2] == home / ".config" / "densepose-kit" / "config.yaml"
    assert paths[3].name == "config.yaml"


def test_env_file_beats_user_file(home, monkeypatch):
    write_yaml(home / ".config" / "densepose-kit" / "config.yaml", {"nms": {"oks_threshold": 0.4}})
    assert load_config()["nms"]["oks_threshold"] == 0.4

    env = write_yaml(home / "env.yaml", {"nms": {"oks_threshold": 0.35}})
    monkeypatch.setenv(CONFIG_ENV, str(env))
    assert load_config()["nms"]["oks_threshold"] == 0.35

    explicit = write_yaml(home / "explicit.yaml", {"runtime": {"seed": 9}})
    config = load_config(explicit)
    assert config["runtime"]["seed"] == 9
    assert config["nms"]["oks_threshold"] == DEFAULT_CONFIG["nms"]["oks_threshold"]


def test_merge_keeps_unrelated_defaults():
    merged = merge_config(DEFAULT_CONFIG, {"nms": {"mode": "soft-linear"}})
    assert merged["nms"]["mode"] == "soft-linear"
    assert merged["nms"]["max_detections"] == 100
    assert merged["loss_weights"] == DEFAULT_CONFIG["loss_weights"]
    assert DEFAULT_CONFIG["nms"]["mode"] == "hard"


def test_unknown_or_misshapen_keys_are_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        merge_config(DEFAULT_CONFIG, {"nms": {"bogus": 1}})
    with pytest.raises(ConfigError):
        merge_config(DEFAULT_CONFIG, {"network": {}})
    with pytest.raises(ConfigError):
        merge_config(DEFAULT_CONFIG, {"nms": {"oks_threshold": {"value": 0.3}}})
    with pytest.raises(ConfigError):
        merge_config(DEFAULT_CONFIG, {"nms": [0.3]})


def test_missing_or_broken_files(home):
    with pytest.raises(ConfigError):
        load_config(home / "absent.yaml")
    broken = home / "broken.yaml"
    broken.write_text("nms: [unclosed")
    with pytest.raises(ParseError):
        load_config(broken)


def test_json_config_files_load(home):
    path = home / "config.json"
    path.write_text('{"runtime": {"seed": 4, "jobs": 2}}')
    config = RunConfig.load(path)
    assert (config.seed, config.jobs) == (4, 2)


def test_saved_config_reloads_identically(home):
    original = RunConfig.load(overrides={"nms.mode": "soft-gaussian", "runtime.jobs": 3})
    path = home / "saved.yaml"
    save_config(original.to_dict(), path)
    assert RunConfig.load(path).to_dict() == original.to_dict()

    save_config(original.to_dict())
    assert (home / ".config" / "densepose-kit" / "config.yaml").exists()


def test_overrides_are_validated(home):
    assert RunConfig.load(overrides={"nms.oks_threshold": 0.5}).nms.oks_threshold == 0.5
    with pytest.raises(InvalidConfig):
        RunConfig.load(overrides={"nms.oks_threshold": 2.0})
    with pytest.raises(InvalidConfig):
        RunConfig.load(overrides={"runtime.seed": -1})
    with pytest.raises(InvalidConfig):
        RunConfig.load(overrides={"runtime.jobs": 0})


def test_default_jobs_follow_cpu_count(home):
    config = RunConfig.from_dict({})
    assert config.jobs >= 1
    assert config.skeleton.k == 17
    assert len(config.ablation.strategies) == 5


def test_skeleton_path_excludes_inline_fields(home):
    path = write_yaml(home / "skeleton.yaml", {"k": 17})
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"skeleton": {"path": str(path), "k": 17}})


def test_malformed_override_keys_are_config_errors(home):
    for key in ("seed", "runtime.seed.value", "network.seed", "nms.bogus", "nms."):
        with pytest.raises(ConfigError, match="override"):
            RunConfig.load(overrides={key: 1})
