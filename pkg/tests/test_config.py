"""Tests for configuration management module.

This module tests loading, validation, hashing and environment overrides of
run configurations.
"""

import json
import os
from pathlib import Path
from unittest.mock import patch

import pytest
import yaml

from src.core.config import (
    RunConfig,
    config_hash,
    create_example_config,
    forward_hash,
    load_run_config,
)
from src.core.errors import ConfigError
from src.data.checkpoint_models import StoreMode


class TestRunConfigDefaults:
    """Test RunConfig defaults."""

    def test_default_values(self):
        """Test RunConfig creates with the documented defaults."""
        config = RunConfig()
        assert config.seed == 42
        assert config.scenario.num_ndts == 10
        assert config.training.rounds == 200
        assert config.training.eta == 0.002
        assert config.untwin.theta == 2.5
        assert config.untwin.epsilon == 10.0
        assert config.checkpoints.mode is StoreMode.ATAC
        assert config.checkpoints.budget == 64
        assert config.probe.seeds == 30
        assert config.execution.workers == 1

    def test_defaults_validate(self):
        """Test the default tree passes validation."""
        RunConfig().validate()

    def test_resolved_cluster_count(self):
        """Test the cluster count defaults to ceil(N / 4)."""
        assert RunConfig().clustering.resolve_count(10) == 3


class TestFromDict:
    """Test building a RunConfig from a mapping."""

    def test_partial_sections(self):
        """Test missing keys fall back to defaults."""
        config = RunConfig.from_dict({'training': {'rounds': 7}, 'checkpoints': {'mode': 'fixed'}})
        assert config.training.rounds == 7
        assert config.training.batch_size == 32
        assert config.checkpoints.mode is StoreMode.FIXED

    def test_unknown_keys_ignored(self):
        """Test unknown sections and parameters do not fail."""
        config = RunConfig.from_dict({'mystery': 1, 'training': {'rounds': 5, 'colour': 'red'}})
        assert config.training.rounds == 5
        assert not hasattr(config.training, 'colour')

    def test_section_must_be_mapping(self):
        """Test a scalar where a section is expected."""
        with pytest.raises(ConfigError) as excinfo:
            RunConfig.from_dict({'training': 5})
        assert excinfo.value.key == 'training'

    def test_root_must_be_mapping(self):
        """Test a list at the root."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict([1, 2])


class TestValidation:
    """Test range checks."""

    def test_negative_eta(self):
        """Test a negative learning rate names its section."""
        config = RunConfig.from_dict({'training': {'eta': -1.0}})
        with pytest.raises(ConfigError) as excinfo:
            config.validate()
        assert excinfo.value.key == 'training'

    def test_lag_longer_than_horizon(self):
        """Test windows must fit the series."""
        config = RunConfig.from_dict({'scenario': {'horizon': 5}, 'training': {'lag': 6}})
        with pytest.raises(ConfigError) as excinfo:
            config.validate()
        assert excinfo.value.key == 'training.lag'

    def test_unknown_non_participant(self):
        """Test non-participants must be valid NDT ids."""
        config = RunConfig.from_dict({'scenario': {'num_ndts': 3}, 'training': {'non_participants': [5]}})
        with pytest.raises(ConfigError, match="Unknown NDT ids"):
            config.validate()

    def test_event_for_missing_node(self):
        """Test topology events are checked against the node list."""
        config = RunConfig.from_dict({
            'scenario': {'num_ndts': 3},
            'topology': {'events': [{'round': 2, 'node_id': 8, 'position': [0, 0]}]},
        })
        with pytest.raises(ConfigError) as excinfo:
            config.validate()
        assert excinfo.value.key == 'topology'

    def test_bad_rollback_rule(self):
        """Test only theorem and literal rules."""
        config = RunConfig.from_dict({'untwin': {'rollback_rule': 'either'}})
        with pytest.raises(ConfigError):
            config.validate()

    def test_unknown_checkpoint_mode(self):
        """Test a mode outside naive/fixed/atac is a config error."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict({'checkpoints': {'mode': 'hourly'}})


class TestHashing:
    """Test config hashes."""

    def test_key_order_irrelevant(self):
        """Test reordered keys hash identically."""
        a = RunConfig.from_dict({'seed': 1, 'training': {'rounds': 9, 'eta': 0.01}})
        b = RunConfig.from_dict({'training': {'eta': 0.01, 'rounds': 9}, 'seed': 1})
        assert config_hash(a) == config_hash(b)

    def test_output_location_excluded(self):
        """Test output_dir and workers do not change the hash."""
        a = RunConfig()
        b = RunConfig.from_dict({'execution': {'output_dir': 'elsewhere', 'workers': 4}})
        assert config_hash(a) == config_hash(b)

    def test_value_change_detected(self):
        """Test any scientific value changes the hash."""
        assert config_hash(RunConfig()) != config_hash(RunConfig.from_dict({'untwin': {'theta': 1.0}}))

    def test_forward_hash_ignores_untwin(self):
        """Test untwinning settings do not invalidate forward artifacts."""
        a = RunConfig()
        b = RunConfig.from_dict({'untwin': {'theta': 1.0}, 'probe': {'seeds': 40}})
        assert forward_hash(a) == forward_hash(b)
        c = RunConfig.from_dict({'training': {'rounds': 10}})
        assert forward_hash(a) != forward_hash(c)

    def test_with_seed(self):
        """Test with_seed replaces both seeds and leaves the original alone."""
        config = RunConfig()
        seeded = config.with_seed(7)
        assert seeded.seed == 7
        assert seeded.scenario.seed == 7
        assert config.seed == 42
        assert config_hash(seeded) != config_hash(config)


class TestLoadRunConfig:
    """Test loading configuration files."""

    def test_load_json(self, tmp_path):
        """Test a JSON file."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({'seed': 3, 'training': {'rounds': 12}}))
        config = load_run_config(str(path))
        assert config.seed == 3
        assert config.training.rounds == 12

    def test_load_yaml(self, tmp_path):
        """Test a YAML file."""
        path = tmp_path / "run.yml"
        path.write_text(yaml.dump({'scenario': {'num_ndts': 4}, 'clustering': {'num_clusters': 2}}))
        config = load_run_config(str(path))
        assert config.scenario.num_ndts == 4
        assert config.clustering.num_clusters == 2

    def test_missing_file(self, tmp_path):
        """Test a path that does not exist."""
        with pytest.raises(FileNotFoundError):
            load_run_config(str(tmp_path / "absent.json"))

    def test_invalid_syntax_reports_line(self, tmp_path):
        """Test a YAML syntax error carries its line."""
        path = tmp_path / "broken.yml"
        path.write_text("seed: 1\ntraining:\n  rounds: [1, 2\n")
        with pytest.raises(ConfigError) as excinfo:
            load_run_config(str(path))
        assert excinfo.value.line is not None

    def test_validation_error_reports_line(self, tmp_path):
        """Test range errors point at the offending section."""
        path = tmp_path / "bad.yml"
        path.write_text("seed: 1\ntraining:\n  eta: -0.5\n")
        with pytest.raises(ConfigError) as excinfo:
            load_run_config(str(path))
        assert excinfo.value.key == 'training'
        assert excinfo.value.line == 2
        assert "line 2" in str(excinfo.value)

    @patch.dict(os.environ, {'UNTWIN_OUT': '/tmp/untwin-env', 'UNTWIN_WORKERS': '3'})
    def test_environment_overrides(self, tmp_path):
        """Test UNTWIN_OUT and UNTWIN_WORKERS."""
        path = tmp_path / "run.json"
        path.write_text("{}")
        config = load_run_config(str(path))
        assert config.execution.output_dir == '/tmp/untwin-env'
        assert config.execution.workers == 3

    @patch.dict(os.environ, {'UNTWIN_WORKERS': 'many'})
    def test_bad_worker_override(self, tmp_path):
        """Test a non-numeric worker count."""
        path = tmp_path / "run.json"
        path.write_text("{}")
        with pytest.raises(ConfigError, match="UNTWIN_WORKERS"):
            load_run_config(str(path))

    def test_config_from_environment(self, tmp_path):
        """Test UNTWIN_CONFIG is used when no path is given."""
        path = tmp_path / "env.json"
        path.write_text(json.dumps({'seed': 11}))
        with patch.dict(os.environ, {'UNTWIN_CONFIG': str(path)}):
            assert load_run_config().seed == 11

    def test_shipped_configs_load(self):
        """Test every file under config/ validates."""
        root = Path(__file__).resolve().parent.parent / "config"
        for path in sorted(root.glob("*")):
            if path.suffix in ('.json', '.yml', '.yaml'):
                load_run_config(str(path))


class TestCreateExampleConfig:
    """Test example config creation."""

    def test_round_trip(self, tmp_path):
        """Test the written example loads back to the defaults."""
        path = tmp_path / "example.json"
        create_example_config(str(path))
        config = load_run_config(str(path))
        assert config_hash(config) == config_hash(RunConfig())
