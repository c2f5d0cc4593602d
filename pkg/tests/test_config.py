import json

import pytest

from src.affect.errors import ConfigError
from src.config import ClipConfig, MelConfig, PathsConfig, PipelineConfig, ServerConfig


def paths(tmp_path):
    return PathsConfig.for_corpus(str(tmp_path / "corpus"), str(tmp_path / "out")).model_dump()


def test_defaults():
    cfg = PipelineConfig(paths=PathsConfig.for_corpus("data", "out"))
    assert cfg.clip.length == 8
    assert cfg.clip.dilation == 6
    assert cfg.subspec_seconds == 10.0
    assert cfg.mel.n_mels == 64
    assert cfg.pseudo == "valence"
    assert cfg.filter is True
    assert cfg.bins == 20
    assert cfg.forward_stride == 10
    assert cfg.paths.annotations.endswith("annotations")


def test_clip_accepts_short_and_long_names():
    assert ClipConfig(l=4, d=2) == ClipConfig(length=4, dilation=2)
    assert ClipConfig(l=4).model_dump(by_alias=True)["l"] == 4


def test_mel_rejects_non_power_of_two_fft():
    with pytest.raises(ValueError):
        MelConfig(n_fft=1000)


def test_dump_and_validate_round_trip(tmp_path):
    cfg = PipelineConfig.model_validate({"paths": paths(tmp_path), "clip": {"l": 3, "d": 4}, "seed": 12})
    assert PipelineConfig.model_validate(cfg.model_dump(mode="json", by_alias=True)) == cfg


def test_load_merges_file_and_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"paths": paths(tmp_path), "seed": 5, "mask": {"thickness": 3.0}}))
    cfg = PipelineConfig.load(str(path), {"seed": 9, "bins": None, "mask": {"use_mask": False}})
    assert cfg.seed == 9
    assert cfg.bins == 20
    assert cfg.mask.thickness == 3.0
    assert cfg.mask.use_mask is False


def test_load_without_file_needs_paths():
    with pytest.raises(ConfigError):
        PipelineConfig.load(None, {"mask": {"use_mask": None}})


def test_nested_override_without_base_section(tmp_path):
    cfg = PipelineConfig.load(None, {"paths": paths(tmp_path), "mask": {"use_mask": None}, "clip": {"l": 2}})
    assert cfg.mask.use_mask is True
    assert cfg.clip.length == 2


@pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
def test_unreadable_config(tmp_path, content):
    path = tmp_path / "config.json"
    path.write_text(content)
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(tmp_path / "absent.json"))


@pytest.mark.parametrize(
    "override",
    [{"pseudo": "everything"}, {"bins": 0}, {"stream_mode": "audio"}, {"clip": {"l": 0}}, {"jobs": 0}],
)
def test_invalid_values_raise_config_error(tmp_path, override):
    with pytest.raises(ConfigError):
        PipelineConfig.load(None, {"paths": paths(tmp_path), **override})


def test_valence_only_alias(tmp_path):
    assert PipelineConfig.load(None, {"paths": paths(tmp_path), "pseudo": "valence-only"}).pseudo == "valence"


def test_jobs_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("AFFECT_JOBS", "3")
    assert PipelineConfig.load(None, {"paths": paths(tmp_path)}).jobs == 3
    assert PipelineConfig.load(None, {"paths": paths(tmp_path), "jobs": 2}).jobs == 2


def test_server_config_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("AFFECT_CONFIG_DIR", str(tmp_path / "state"))
    monkeypatch.setenv("AFFECT_LOG_LEVEL", "DEBUG")
    config = ServerConfig.from_env()
    assert config.config_dir == str(tmp_path / "state")
    assert config.log_level == "DEBUG"
    assert (tmp_path / "state").is_dir()
