"""Tests for config loading, overrides, validation and the stage hashes."""

import json

import pytest

from svam.config import RunConfig, config_from_dict, load_config, save_config
from svam.errors import ConfigError


class TestLoadConfig:
    def test_defaults_without_file(self):
        config = load_config()
        assert config.training.seed == 0
        assert config.latent_size == 8
        assert config.feature_channels == 40

    def test_file_values_override_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"vdm": {"steps": 10}, "training": {"lr": 5e-4}}))
        config = load_config(str(path))
        assert config.vdm.steps == 10
        assert config.training.lr == pytest.approx(5e-4)

    def test_environment_then_arguments(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SVAM_SEED", "9")
        monkeypatch.setenv("SVAM_OUT_DIR", str(tmp_path / "env"))
        assert load_config().training.seed == 9
        config = load_config(seed=3, out_dir=str(tmp_path / "cli"))
        assert config.training.seed == 3
        assert config.out_dir == tmp_path / "cli"

    def test_config_path_from_environment(self, monkeypatch, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"world": {"frame_size": 16}}))
        monkeypatch.setenv("SVAM_CONFIG", str(path))
        assert load_config().world.frame_size == 16

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))

    def test_invalid_json_raises(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_bad_seed_environment_raises(self, monkeypatch):
        monkeypatch.setenv("SVAM_SEED", "many")
        with pytest.raises(ConfigError):
            load_config()


class TestValidation:
    @pytest.mark.parametrize("payload", [
        {"vdm": {"sampler": "ddim"}},
        {"optimizer": {}},
        {"training": {"batch": 2.5}},
        {"world": {"frame_size": 30}},
        {"decouplers": {"mode": "teacher"}},
        {"decouplers": {"hidden": 30, "heads": 4}},
        {"world": {"dataset_tasks": [5]}},
        {"training": {"lr": "fast"}},
        {"training": {"batch": True}},
        {"world": {"n_classes": 6}},
        {"world": {"n_classes": 2}},
        {"world": {"tasks": [1, 7], "dataset_tasks": [1]}},
        {"world": {"tasks": [], "dataset_tasks": []}},
        {"decouplers": {"geo_channels": 3}},
        {"decouplers": {"sem_channels": 16}},
    ])
    def test_rejected(self, payload):
        with pytest.raises(ConfigError):
            config_from_dict(payload)

    def test_integer_accepted_for_float_field(self):
        assert config_from_dict({"training": {"lr": 1}}).training.lr == 1.0


class TestHashes:
    def test_training_section_does_not_change_stage_hashes(self):
        base = RunConfig()
        other = config_from_dict({"training": {"vdm_steps": 10, "seed": 4}})
        assert all(base.stage_hash(s) == other.stage_hash(s) for s in (1, 2, 3))

    def test_stage_hash_follows_its_sections(self):
        base = RunConfig()
        policy = config_from_dict({"policy": {"steps": 8}})
        assert policy.stage_hash(2) == base.stage_hash(2)
        assert policy.stage_hash(3) != base.stage_hash(3)
        vdm = config_from_dict({"vdm": {"steps": 10}})
        assert all(vdm.stage_hash(s) != base.stage_hash(s) for s in (1, 2, 3))

    def test_saved_config_reloads_identically(self, tmp_path):
        config = config_from_dict({"vdm": {"steps": 12}, "paths": {"out_dir": "x"}})
        save_config(config, tmp_path / "c.json")
        assert load_config(str(tmp_path / "c.json")).canonical_json() == config.canonical_json()
