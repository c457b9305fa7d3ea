"""Tests for on-disk artifact formats."""

import numpy as np
import pandas as pd
import pytest

from src.core.errors import InvalidInput, StateError
from src.data.checkpoint_models import Checkpoint, StorePolicy
from src.data.topology import ClusterAssignment, ConnectivityMatrix, line_topology
from src.data.traffic import ScenarioConfig, TrafficKind, generate_traces
from src.data.twin_model import ModelArch, TwinModel
from src.integrations.storage import (
    CSV_SCHEMA,
    LOCK_FILE,
    STORE_INDEX,
    output_lock,
    read_checkpoint,
    read_history,
    read_json,
    read_metrics_csv,
    read_model,
    read_store,
    read_traces_csv,
    write_checkpoint,
    write_history,
    write_json,
    write_metrics_csv,
    write_model,
    write_store,
    write_traces_csv,
)
from src.services.checkpoints import create_checkpoint_store
from src.services.twinning import create_twinning_engine

from .conftest import small_config


class TestBinaryArtifacts:
    """Test model, checkpoint and history files."""

    def test_model_file(self, tmp_path):
        """Test a model survives a write and read with its manifest extras."""
        model = TwinModel(np.array([0.5, -1.25, 3.0]), ModelArch.LINEAR, input_dim=2)
        path = tmp_path / "model.bin"
        write_model(path, model, {"config_hash": "abc"})
        loaded, manifest = read_model(path)
        np.testing.assert_array_equal(loaded.params, model.params)
        assert loaded.input_dim == 2
        assert manifest["config_hash"] == "abc"

    def test_truncated_file(self, tmp_path):
        """Test a shortened payload is reported rather than misread."""
        path = tmp_path / "model.bin"
        write_model(path, TwinModel(np.arange(4, dtype=float), input_dim=3))
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(StateError, match="is truncated"):
            read_model(path)

    def test_missing_file(self, tmp_path):
        """Test a missing artifact."""
        with pytest.raises(StateError, match="Artifact not found"):
            read_model(tmp_path / "absent.bin")

    def test_checkpoint_file(self, tmp_path):
        """Test the checkpoint keeps its connectivity, clusters and anchor flag."""
        values = np.array([[0.0, 0.4], [0.4, 0.0]])
        clusters = ClusterAssignment(1, {0: 0, 1: 0}, round_tag=5)
        checkpoint = Checkpoint(5, TwinModel(np.array([1.0, 2.0])), ConnectivityMatrix(values, 5), clusters, True)
        path = write_checkpoint(tmp_path, checkpoint)
        assert path.name == "ckpt_5.bin"
        loaded = read_checkpoint(path)
        assert loaded.round == 5
        assert loaded.anchor
        np.testing.assert_array_equal(loaded.connectivity.values, values)
        assert loaded.clusters.to_dict() == clusters.to_dict()

    def test_history_full_retention(self, tmp_path):
        """Test every global and local model is restored."""
        engine = create_twinning_engine(small_config(rounds=4))
        history = engine.run_forward()
        path = tmp_path / "history.bin"
        write_history(path, history, "hash")
        loaded, manifest = read_history(path)
        assert manifest["config_hash"] == "hash"
        assert loaded.rounds == 4
        np.testing.assert_array_equal(loaded.initial_model.params, history.initial_model.params)
        for t in range(1, 5):
            np.testing.assert_array_equal(loaded.global_model(t).params, history.global_model(t).params)
            assert loaded.record(t).participating == history.record(t).participating
            for n, model in history.record(t).local_models.items():
                np.testing.assert_array_equal(loaded.record(t).local_models[n].params, model.params)
        assert [e.round for e in loaded.topology_log] == [e.round for e in history.topology_log]

    def test_history_summary_retention(self, tmp_path):
        """Test summarised rounds still answer exclusion means."""
        engine = create_twinning_engine(small_config(rounds=3, training={'retention': 'summary'}))
        engine.set_candidate_sets([{1}, {0, 2}])
        history = engine.run_forward()
        path = tmp_path / "history.bin"
        write_history(path, history, "hash")
        loaded, _ = read_history(path)
        assert loaded.record(2).local_models is None
        np.testing.assert_allclose(loaded.mean_excluding(2, {1}), history.mean_excluding(2, {1}))
        np.testing.assert_allclose(loaded.mean_excluding(3, {0, 2}), history.mean_excluding(3, {0, 2}))

    def test_identical_runs_identical_bytes(self, tmp_path):
        """Test history files carry nothing run-specific."""
        for name in ("a.bin", "b.bin"):
            history = create_twinning_engine(small_config(rounds=3, seed=5)).run_forward()
            write_history(tmp_path / name, history, "hash")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


class TestStoreFiles:
    """Test checkpoint store persistence."""

    def test_store_round_trip(self, tmp_path):
        """Test rounds, anchors and controller state survive."""
        store = create_checkpoint_store(StorePolicy(mode="fixed", fixed_interval=2))
        create_twinning_engine(small_config(rounds=7)).run_forward(store)
        write_store(store, tmp_path / "ckpt", "hash")
        assert (tmp_path / "ckpt" / STORE_INDEX).exists()
        loaded, index = read_store(tmp_path / "ckpt")
        assert index["config_hash"] == "hash"
        assert loaded.rounds() == store.rounds() == [0, 2, 4, 6]
        assert loaded.policy.fixed_interval == 2
        assert loaded.state.last_round == store.state.last_round
        np.testing.assert_array_equal(loaded.get(6).model.params, store.get(6).model.params)

    def test_stale_checkpoints_removed(self, tmp_path):
        """Test rewriting a store drops files of evicted rounds."""
        directory = tmp_path / "ckpt"
        directory.mkdir()
        (directory / "ckpt_99.bin").write_bytes(b"old")
        store = create_checkpoint_store(StorePolicy(mode="naive"))
        create_twinning_engine(small_config(rounds=2)).run_forward(store)
        write_store(store, directory, "hash")
        assert not (directory / "ckpt_99.bin").exists()
        assert sorted(p.name for p in directory.glob("ckpt_*.bin")) == ["ckpt_0.bin", "ckpt_1.bin", "ckpt_2.bin"]


class TestTables:
    """Test CSV and JSON tables."""

    def test_traces_csv(self, tmp_path):
        """Test exported traces import back with both kinds per sensor."""
        traces = generate_traces(ScenarioConfig(num_ndts=3, horizon=40), line_topology(3))
        path = tmp_path / "traces.csv"
        write_traces_csv(path, traces)
        loaded = read_traces_csv(path)
        assert sorted(loaded) == [0, 1, 2]
        for n in range(3):
            for kind in TrafficKind:
                np.testing.assert_allclose(loaded[n].get(kind).readings, traces[n].get(kind).readings)

    def test_traces_csv_missing_column(self, tmp_path):
        """Test an import without the value column."""
        path = tmp_path / "bad.csv"
        pd.DataFrame({"sensor_id": [0], "time_index": [0], "kind": ["flow"]}).to_csv(path, index=False)
        with pytest.raises(InvalidInput, match="missing columns"):
            read_traces_csv(path)

    def test_metrics_schema_header(self, tmp_path):
        """Test metrics files start with the schema line and read back without it."""
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [{"seed": 0, "ped": 0.5}, {"seed": 1, "ped": 0.25}])
        assert path.read_text().splitlines()[0] == CSV_SCHEMA
        frame = read_metrics_csv(path)
        assert list(frame.columns) == ["seed", "ped"]
        assert frame["ped"].tolist() == [0.5, 0.25]

    def test_missing_metrics(self, tmp_path):
        """Test reading metrics that were never written."""
        with pytest.raises(StateError):
            read_metrics_csv(tmp_path / "metrics.csv")

    def test_json_numpy_values(self, tmp_path):
        """Test numpy scalars and sets serialise."""
        path = tmp_path / "plan.json"
        write_json(path, {"k": np.int64(3), "sigma": np.float64(0.5), "set": {2, 1}})
        assert read_json(path) == {"k": 3, "sigma": 0.5, "set": [1, 2]}

    def test_missing_json(self, tmp_path):
        """Test a missing JSON artifact."""
        with pytest.raises(StateError, match="Artifact not found"):
            read_json(tmp_path / "manifest.json")


class TestOutputLock:
    """Test the output directory lock."""

    def test_lock_released(self, tmp_path):
        """Test the lock file exists only inside the block."""
        with output_lock(tmp_path / "run") as directory:
            assert (directory / LOCK_FILE).exists()
        assert not (tmp_path / "run" / LOCK_FILE).exists()

    def test_concurrent_lock_refused(self, tmp_path):
        """Test a second command on a locked directory."""
        with output_lock(tmp_path):
            with pytest.raises(StateError, match="locked"):
                with output_lock(tmp_path):
                    pass
