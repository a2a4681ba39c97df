"""Run configuration: defaults, validation, file loading."""

import json

import pytest

from dwellgate.config import RunConfig, load_run_config
from dwellgate.errors import ConfigError


class TestDefaults:
    def test_every_default(self):
        config = RunConfig()
        assert config.horizon_s_ms == 300_000
        assert config.buffer_ms == 60_000
        assert config.denoise_min_dwell_ms == 250
        assert config.denoise_max_dwell_ms == 1_800_000
        assert config.n_min == 20
        assert config.target_active_fraction == 0.6667
        assert config.epoch_ms == 21_600_000
        assert config.stats_mode == "cumulative"
        assert config.correlation_normalization == "raw"
        assert config.segment_levels == 2
        assert config.fixed_epsilon is None
        assert config.policy_file is None
        assert config.seeds == (101, 102, 103)
        assert config.replicas == 3
        assert config.learning_rate == 0.02
        assert config.hash_dim == 262_144

    def test_none_path_means_defaults(self):
        assert load_run_config(None) == RunConfig()


class TestFromDict:
    def test_applies_known_keys(self):
        config = RunConfig.from_dict({"buffer_ms": 0, "replicas": 1,
                                      "seeds": [7], "stats_mode": "sliding"})
        assert config.buffer_ms == 0
        assert config.seeds == (7,)
        assert config.stats_mode == "sliding"

    def test_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="horizon_ms"):
            RunConfig.from_dict({"horizon_ms": 100})

    def test_rejects_non_mapping(self):
        with pytest.raises(ConfigError, match="mapping"):
            RunConfig.from_dict([1, 2, 3])

    def test_rejects_scalar_seeds(self):
        with pytest.raises(ConfigError, match="seeds"):
            RunConfig.from_dict({"seeds": "101"})

    def test_round_trip(self):
        config = RunConfig(buffer_ms=5, seeds=(1, 2), replicas=2)
        assert RunConfig.from_dict(config.to_dict()) == config
        assert config.to_dict()["seeds"] == [1, 2]


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        {"horizon_s_ms": 0},
        {"horizon_s_ms": -5},
        {"buffer_ms": -1},
        {"denoise_min_dwell_ms": -1},
        {"denoise_min_dwell_ms": 2000, "denoise_max_dwell_ms": 1000},
        {"denoise_min_dwell_ms": 1000, "denoise_max_dwell_ms": 1000},
        {"n_min": 0},
        {"n_min": 2.5},
        {"target_active_fraction": 0.0},
        {"target_active_fraction": 1.0},
        {"target_active_fraction": "most"},
        {"epoch_ms": 0},
        {"stats_mode": "windowed"},
        {"correlation_normalization": "zscore"},
        {"segment_levels": 3},
        {"fixed_epsilon": -0.1},
        {"replicas": 0},
        {"replicas": 1.5},
        {"seeds": (1, "two"), "replicas": 1},
        {"seeds": (True, False), "replicas": 1},
        {"seeds": (1, 2), "replicas": 3},
        {"learning_rate": 0.0},
        {"learning_rate": -0.1},
        {"hash_dim": 1},
        {"hash_dim": 2.0},
    ])
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            RunConfig(**kwargs)

    def test_error_messages_name_the_field(self):
        with pytest.raises(ConfigError, match="epoch_ms"):
            RunConfig(epoch_ms=-1)
        with pytest.raises(ConfigError, match="segment_levels"):
            RunConfig(segment_levels=4)
        with pytest.raises(ConfigError, match="seeds"):
            RunConfig(seeds=(1,), replicas=2)

    def test_boundary_values_accepted(self):
        config = RunConfig(buffer_ms=0, fixed_epsilon=0.0, replicas=1,
                           seeds=(0,), hash_dim=2, n_min=1)
        assert config.fixed_epsilon == 0.0


class TestLoadRunConfig:
    def test_yaml_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("buffer_ms: 0\nreplicas: 1\nseeds: [9]\n")
        config = load_run_config(str(path))
        assert config.buffer_ms == 0
        assert config.seeds == (9,)

    def test_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"epoch_ms": 1000, "hash_dim": 64}))
        config = load_run_config(str(path))
        assert config.epoch_ms == 1000
        assert config.hash_dim == 64

    def test_empty_yaml_is_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_run_config(str(path)) == RunConfig()

    def test_json_parse_error_names_path_and_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "buffer_ms": ,\n}\n')
        with pytest.raises(ConfigError, match=r"broken\.json:2"):
            load_run_config(str(path))

    def test_yaml_parse_error_names_path(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("buffer_ms: [1, 2\n")
        with pytest.raises(ConfigError, match=r"broken\.yaml"):
            load_run_config(str(path))

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("window_ms: 100\n")
        with pytest.raises(ConfigError, match="window_ms"):
            load_run_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_run_config(str(tmp_path / "absent.yaml"))
