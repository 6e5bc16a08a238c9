import pytest

from fedasmu.config import (ExperimentConfig, config_hash, load_config,
                            override, save_config)
from fedasmu.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "exp.ini"
    path.write_text(text)
    return path


class TestLoad:
    def test_minimal_config_fills_defaults(self, tmp_path):
        path = write(tmp_path, "[task]\nkind = linear-softmax\n"
                               "[experiment]\nstrategies = FedASMU\n")
        cfg = load_config(path)
        assert cfg.m == 100 and cfg.tau == 99 and cfg.trigger_period == 10.0
        assert cfg.eta_lambda == 1e-4 and cfg.eta_rl == 1e-3
        assert cfg.seeds == (1, 2, 3, 4, 5)

    def test_zero_staleness_bound_rejected(self, tmp_path):
        path = write(tmp_path, "[run]\nstaleness_limit = 0\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path, "[run]\nwarp_speed = 9\n")
        with pytest.raises(ConfigError, match="warp_speed"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write(tmp_path, "[cluster]\nnodes = 3\n")
        with pytest.raises(ConfigError, match="cluster"):
            load_config(path)

    def test_bad_value_reports_location(self, tmp_path):
        path = write(tmp_path, "[run]\nrounds = soon\n")
        with pytest.raises(ConfigError, match=r"\[run\] rounds"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_unknown_strategy_rejected(self, tmp_path):
        path = write(tmp_path, "[experiment]\nstrategies = FedProx\n")
        with pytest.raises(ConfigError, match="FedProx"):
            load_config(path)


class TestRoundTrip:
    def test_dump_load_identity(self, tmp_path):
        cfg = ExperimentConfig(m=12, rounds=77, class_sep=2.25,
                               strategies=("FedASMU", "FedAvg"),
                               seeds=(3, 1, 4), block_on_fresh=True)
        path = tmp_path / "dumped.ini"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_defaults_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        path = tmp_path / "defaults.ini"
        save_config(cfg, path)
        assert load_config(path) == cfg


class TestHash:
    def test_stable_for_equal_configs(self):
        assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())

    def test_changes_with_any_semantic_field(self):
        base = config_hash(ExperimentConfig())
        assert config_hash(ExperimentConfig(rounds=501)) != base
        assert config_hash(ExperimentConfig(eta_local=0.051)) != base
        assert config_hash(ExperimentConfig(seeds=(1,))) != base


class TestOverride:
    def test_override_applies_and_validates(self):
        cfg = override(ExperimentConfig(), rounds=10, m=5, m_prime=2)
        assert cfg.rounds == 10
        with pytest.raises(ConfigError):
            override(ExperimentConfig(), tau=0)
        with pytest.raises(ConfigError):
            override(ExperimentConfig(), no_such_field=1)

    def test_target_accuracy_bounds(self):
        with pytest.raises(ConfigError):
            override(ExperimentConfig(), target_accuracy=1.5)


def test_schema_covers_dataclass_exactly():
    from dataclasses import fields
    from fedasmu.config import SCHEMA
    schema_fields = {f for sec in SCHEMA.values() for f, _ in sec.values()}
    dc_fields = {f.name for f in fields(ExperimentConfig)}
    assert schema_fields == dc_fields


def test_run_config_carries_strategy():
    cfg = ExperimentConfig()
    rc = cfg.run_config("FedBuff")
    assert rc.strategy == "FedBuff"
    assert rc.knobs.fedbuff_buffer == cfg.fedbuff_buffer
    rc.validate()
