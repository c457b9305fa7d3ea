"""End-to-end tests of the command line."""

import json

import pytest

from main import main, parse_ids
from src.core.errors import InvalidInput
from src.integrations.storage import HISTORY_FILE, MANIFEST_FILE, read_json, read_metrics_csv
from src.services import experiment
from src.services.untwinning import UntwinningService

from .conftest import small_config


def write_config(tmp_path, **kwargs):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_config(**kwargs).to_dict()))
    return str(path)


class TestParseIds:
    """Test NDT id lists."""

    def test_comma_list(self):
        """Test spaces and trailing commas are tolerated."""
        assert parse_ids("1, 4,7,") == [1, 4, 7]

    def test_not_numbers(self):
        """Test non-integer ids."""
        with pytest.raises(InvalidInput):
            parse_ids("a,b")

    def test_empty(self):
        """Test an empty list."""
        with pytest.raises(InvalidInput):
            parse_ids(",")


class TestTwinCommand:
    """Test the twin command."""

    def test_artifacts_written(self, tmp_path):
        """Test twin writes the manifest, history, checkpoints and metrics."""
        config = write_config(tmp_path)
        out = tmp_path / "run"
        main(["twin", "--config", config, "--out", str(out)])
        for name in (MANIFEST_FILE, HISTORY_FILE, "model.bin", "metrics.csv", "traces.csv", "timing.json"):
            assert (out / name).exists()
        assert (out / "checkpoints" / "ckpt_0.bin").exists()
        assert not (out / ".lock").exists()
        frame = read_metrics_csv(out / "metrics.csv")
        assert frame["mode"].tolist() == ["twin"]
        assert frame["rounds_executed"].tolist() == [10]

    def test_seeded_runs_byte_identical(self, tmp_path):
        """Test two runs with the same seed write identical histories."""
        config = write_config(tmp_path)
        for name in ("a", "b"):
            main(["twin", "--config", config, "--seed", "7", "--out", str(tmp_path / name)])
        first = (tmp_path / "a" / HISTORY_FILE).read_bytes()
        second = (tmp_path / "b" / HISTORY_FILE).read_bytes()
        assert first == second
        assert read_json(tmp_path / "a" / MANIFEST_FILE)["seed"] == 7

    def test_fixed_interval_index(self, tmp_path):
        """Test p=10 over T=200 lists 20 checkpoints in the store index."""
        config = write_config(tmp_path, rounds=200, checkpoints={'mode': 'fixed', 'fixed_interval': 10})
        out = tmp_path / "run"
        main(["twin", "--config", config, "--out", str(out)])
        index = read_json(out / "checkpoints" / "store_index.json")
        assert index["count"] == 20
        assert index["rounds"][-1] == 200

    def test_missing_config_exits_one(self, tmp_path):
        """Test a missing config file is a fatal error."""
        with pytest.raises(SystemExit) as excinfo:
            main(["twin", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "run")])
        assert excinfo.value.code == 1

    def test_interrupt_exits_130(self, tmp_path, mocker):
        """Test Ctrl-C during a command."""
        mocker.patch("main.run", side_effect=KeyboardInterrupt)
        with pytest.raises(SystemExit) as excinfo:
            main(["twin", "--out", str(tmp_path / "run")])
        assert excinfo.value.code == 130

    def test_invalid_config_exits_two(self, tmp_path):
        """Test validation failures use the simulator error code."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({'training': {'eta': -1}}))
        with pytest.raises(SystemExit) as excinfo:
            main(["twin", "--config", str(path), "--out", str(tmp_path / "run")])
        assert excinfo.value.code == 2


class TestUntwinCommand:
    """Test the untwin command against a twinned directory."""

    def twin(self, tmp_path, **kwargs):
        config = write_config(tmp_path, **kwargs)
        out = str(tmp_path / "run")
        main(["twin", "--config", config, "--out", out])
        return config, out

    def test_sru_plan(self, tmp_path):
        """Test plan.json of a single request."""
        config, out = self.twin(tmp_path)
        main(["untwin", "sru", "--target", "1", "--config", config, "--out", out])
        plan = read_json(tmp_path / "run" / "plan.json")
        assert plan["mode"] == "sru"
        assert plan["targets"] == [1]
        assert 1 in plan["excluded"]
        assert len(plan["plans"]) == 1
        step = plan["plans"][0]
        assert step["t_star"] <= step["t_safe"] <= 10
        assert step["K"] == 10 - step["t_safe"]
        assert step["sigma"] >= 0.0
        assert (tmp_path / "run" / "model_sru.bin").exists()
        modes = read_metrics_csv(tmp_path / "run" / "metrics.csv")["mode"].tolist()
        assert modes == ["twin", "sru"]

    def test_pru_plan(self, tmp_path):
        """Test plan.json of parallel requests has one plan per affected cluster."""
        config, out = self.twin(tmp_path, num_ndts=4, clustering={'num_clusters': 2})
        main(["untwin", "pru", "--requests", "0,3", "--config", config, "--out", out])
        plan = read_json(tmp_path / "run" / "plan.json")
        assert plan["mode"] == "pru"
        assert plan["targets"] == [0, 3]
        assert {0, 3} <= set(plan["excluded"])
        assert 1 <= len(plan["plans"]) <= 2
        assert plan["K_max"] == max(p["K"] for p in plan["plans"])

    def test_oracle_equivalence(self, tmp_path):
        """Test zero noise and a restart from round 0 match scratch retraining."""
        config, out = self.twin(tmp_path)
        main([
            "untwin", "sru", "--target", "0", "--with-oracle", "--noise", "0", "--force-t-star", "0",
            "--config", config, "--out", out,
        ])
        row = read_metrics_csv(tmp_path / "run" / "metrics.csv").iloc[-1]
        assert row["mode"] == "sru"
        assert row["ped_target"] <= 1e-9
        assert row["param_distance"] <= 1e-9

    def test_oracle_times_warm_up_and_three_runs(self, tmp_path, mocker):
        """Test --with-oracle times untwinning and scratch retraining with one warm-up and three runs each."""
        config, out = self.twin(tmp_path)
        sru = mocker.spy(UntwinningService, "sru")
        scratch = mocker.spy(experiment, "retrain_from_scratch")
        main(["untwin", "sru", "--target", "0", "--with-oracle", "--config", config, "--out", out])
        assert sru.call_count == 4
        assert scratch.call_count == 4
        timing = read_json(tmp_path / "run" / "timing.json")
        assert timing["sru"] > 0
        assert timing["scratch"] > 0
        row = read_metrics_csv(tmp_path / "run" / "metrics.csv").iloc[-1]
        assert row["wall_time"] == pytest.approx(timing["sru"])

    def test_without_artifacts(self, tmp_path):
        """Test untwin before twin exits with the simulator error code."""
        config = write_config(tmp_path)
        with pytest.raises(SystemExit) as excinfo:
            main(["untwin", "sru", "--target", "0", "--config", config, "--out", str(tmp_path / "empty")])
        assert excinfo.value.code == 2

    def test_sru_needs_target(self, tmp_path):
        """Test sru without --target."""
        config, out = self.twin(tmp_path)
        with pytest.raises(SystemExit) as excinfo:
            main(["untwin", "sru", "--config", config, "--out", out])
        assert excinfo.value.code == 2

    def test_mixed_configuration_refused(self, tmp_path):
        """Test artifacts from another forward configuration are not reused."""
        _, out = self.twin(tmp_path)
        other = tmp_path / "other.json"
        other.write_text(json.dumps(small_config(rounds=12).to_dict()))
        with pytest.raises(SystemExit) as excinfo:
            main(["untwin", "sru", "--target", "0", "--config", str(other), "--out", out])
        assert excinfo.value.code == 2


class TestCompareAndReport:
    """Test compare and report."""

    def test_compare_needs_thirty_seeds(self, tmp_path):
        """Test the probe refuses small seed counts."""
        config = write_config(tmp_path)
        with pytest.raises(SystemExit) as excinfo:
            main(["compare", "--seeds", "5", "--config", config, "--out", str(tmp_path / "run")])
        assert excinfo.value.code == 2

    def test_report(self, tmp_path, capsys):
        """Test the report summarises checkpoints and the ablation."""
        config = write_config(tmp_path)
        out = tmp_path / "run"
        main(["twin", "--config", config, "--out", str(out)])
        capsys.readouterr()
        main(["report", "--ablation", "--config", config, "--out", str(out)])
        text = capsys.readouterr().out
        assert "Checkpoints:" in text
        assert "ablation naive" in text
        assert "ablation atac" in text
        assert (out / "ablation.csv").exists()

    def test_report_study(self, tmp_path, capsys):
        """Test --study writes one row per seed and removal strategy."""
        config = write_config(tmp_path, rounds=4)
        out = tmp_path / "run"
        main(["twin", "--config", config, "--out", str(out)])
        capsys.readouterr()
        main(["report", "--study", "--target", "1", "--seeds", "2", "--config", config, "--out", str(out)])
        text = capsys.readouterr().out
        assert "study NDT 1 over 2 seeds" in text
        frame = read_metrics_csv(out / "study.csv")
        assert len(frame) == 6
        assert sorted(set(frame["strategy"])) == ["connected", "none", "target"]
        assert frame["seed"].tolist().count(0) == 3

    def test_report_study_unknown_target(self, tmp_path):
        """Test a study target outside the scenario."""
        config = write_config(tmp_path, rounds=2)
        out = tmp_path / "run"
        main(["twin", "--config", config, "--out", str(out)])
        with pytest.raises(SystemExit) as excinfo:
            main(["report", "--study", "--target", "9", "--seeds", "1", "--config", config, "--out", str(out)])
        assert excinfo.value.code == 2

    def test_report_without_artifacts(self, tmp_path):
        """Test report on an empty directory."""
        config = write_config(tmp_path)
        with pytest.raises(SystemExit) as excinfo:
            main(["report", "--config", config, "--out", str(tmp_path / "empty")])
        assert excinfo.value.code == 2
