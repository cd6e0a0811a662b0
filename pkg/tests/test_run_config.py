import json

import pytest

from skinssl.config import CONFIGS_DIR, PROTOTYPES_DESK, sub_seed
from skinssl.encoder import EncoderConfig
from skinssl.errors import ConfigError
from skinssl.run_config import RunConfig, load_run_config, resolve_includes


def write(path, data):
    path.write_text(json.dumps(data))
    return path


class TestIncludes:
    def test_including_file_wins(self, tmp_path):
        write(tmp_path / "base.json", {"seed": 1, "ssl": {"epochs": 10, "batch_size": 4}})
        child = write(tmp_path / "child.json", {"include": "base.json", "ssl": {"epochs": 3}})
        config = load_run_config(child)
        assert config.seed == 1
        assert config.ssl.epochs == 3
        assert config.ssl.batch_size == 4

    def test_cycle(self, tmp_path):
        write(tmp_path / "a.json", {"include": "b.json"})
        write(tmp_path / "b.json", {"include": "a.json"})
        with pytest.raises(ConfigError, match="cycle"):
            resolve_includes(tmp_path / "a.json")

    def test_missing_include(self, tmp_path):
        child = write(tmp_path / "child.json", {"include": "nowhere.json"})
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(child)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{seed: ")
        with pytest.raises(ConfigError):
            load_run_config(path)

    @pytest.mark.parametrize("name", ["desk.json", "full.json", "smoke.json"])
    def test_shipped_configs_load(self, name):
        config = load_run_config(CONFIGS_DIR / name)
        assert config.encoder.d % config.encoder.heads == 0

    def test_smoke_uses_tiny_encoder(self):
        config = load_run_config(CONFIGS_DIR / "smoke.json")
        assert config.encoder.d == 16
        assert config.downstream.budgets == (0.5, 1.0)
        assert config.simulator.joystick_trajectories == 6

    def test_prototype_counts(self):
        assert EncoderConfig.desk().k == PROTOTYPES_DESK == 1024
        ks = {name: load_run_config(CONFIGS_DIR / f"{name}.json").encoder.k
              for name in ("smoke", "desk", "full")}
        assert ks == {"smoke": 8, "desk": 256, "full": 65536}

    def test_desk_warmup(self):
        config = load_run_config(CONFIGS_DIR / "desk.json")
        assert (config.ssl.epochs, config.ssl.warmup_epochs) == (50, 5)


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="colour"):
            RunConfig.from_dict({"colour": "blue"})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            RunConfig.from_dict({"ssl": {"learning_rate": 0.1}})

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            RunConfig.from_dict({"encoder": {"preset": "huge"}})

    def test_invalid_values_become_config_errors(self):
        with pytest.raises(ConfigError, match="encoder"):
            RunConfig.from_dict({"encoder": {"d": 15, "heads": 2}})
        with pytest.raises(ConfigError, match="pipeline"):
            RunConfig.from_dict({"pipeline": {"flux_scale": 0.0}})

    def test_preset_overrides(self):
        config = RunConfig.from_dict({"encoder": {"preset": "tiny", "layers": 3}})
        assert (config.encoder.d, config.encoder.layers) == (16, 3)


class TestHash:
    def test_paths_do_not_change_hash(self):
        a = RunConfig.from_dict({"paths": {"data_dir": "/tmp/a"}})
        b = RunConfig.from_dict({"paths": {"runs_dir": "/elsewhere"}})
        assert a.config_hash() == b.config_hash()

    def test_settings_change_hash(self):
        assert (RunConfig.from_dict({"ssl": {"epochs": 3}}).config_hash()
                != RunConfig.from_dict({"ssl": {"epochs": 4}}).config_hash())

    def test_round_trip(self):
        config = load_run_config(CONFIGS_DIR / "smoke.json")
        assert RunConfig.from_dict(config.to_dict()).config_hash() == config.config_hash()

    def test_with_seed(self):
        config = load_run_config(CONFIGS_DIR / "smoke.json")
        reseeded = config.with_seed(5)
        assert reseeded.seed == 5
        assert reseeded.encoder == config.encoder
        assert reseeded.config_hash() != config.config_hash()
        assert reseeded.sub_seed("data") == sub_seed(5, "data")

    def test_seed_override(self):
        assert load_run_config(CONFIGS_DIR / "smoke.json", seed=9).seed == 9


def test_sub_seeds_are_distinct():
    names = ["data", "init", "masking", "loader", "split", "subsample", "decoder:force"]
    assert len({sub_seed(0, name) for name in names}) == len(names)
    assert sub_seed(0, "data") != sub_seed(1, "data")
