"""CLI commands: determinism, round trips, exit codes, artifact formats."""

import json
from pathlib import Path

import numpy as np
import pytest

from qkdguard.cli import main
from qkdguard.config import (
    ExperimentConfig,
    TrainSettings,
    config_digest,
    load_config,
    save_config,
)
from qkdguard.datasets import read_dataset
from qkdguard.defender import load_model, score_stream


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    cfg = ExperimentConfig(
        train=TrainSettings(
            rounds=1, generations=3, population=4, block_size=10_000,
            honest_blocks_per_round=300, hard_negatives_per_round=16,
            miss_eval_blocks=16, eval_blocks_per_candidate=2, temporal_epochs=2,
        )
    )
    save_config(cfg, path)
    return str(path)


@pytest.fixture(scope="module")
def trained_model(smoke_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "model.txt"
    rc = main(["train", "--config", smoke_config, "--seed", "1", "--out", str(out)])
    assert rc == 0
    return str(out)


class TestConfig:
    def test_round_trip(self, smoke_config):
        cfg = load_config(smoke_config)
        assert cfg.train.rounds == 1
        assert len(config_digest(cfg)) == 16

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"version": 99}))
        with pytest.raises(ValueError):
            load_config(path)


class TestSimulate:
    def test_honest_dataset_shape(self, smoke_config, tmp_path):
        out = tmp_path / "honest.ndjson"
        rc = main(["simulate", "--config", smoke_config, "--seed", "3",
                   "--out", str(out), "--blocks", "10"])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 11  # header + 10 rows
        header = json.loads(lines[0])
        assert header["type"] == "header" and header["count"] == 10
        data = read_dataset(out)
        assert len(data.blocks) == 10
        assert data.features.shape == (10, 16)

    def test_byte_identical_reruns(self, smoke_config, tmp_path):
        a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        for out in (a, b):
            rc = main(["simulate", "--config", smoke_config, "--seed", "5",
                       "--out", str(out), "--blocks", "8", "--family", "mixed"])
            assert rc == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_family_usage_error(self, smoke_config, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--config", smoke_config, "--out",
                  str(tmp_path / "x.ndjson"), "--family", "bogus"])
        assert exc.value.code == 2

    def test_attacked_dataset_labeled(self, smoke_config, tmp_path):
        out = tmp_path / "ts.ndjson"
        main(["simulate", "--config", smoke_config, "--seed", "4", "--out", str(out),
              "--blocks", "6", "--family", "time_shift"])
        data = read_dataset(out)
        assert all(f == "time_shift" for f in data.families)
        assert np.all(data.leaks >= 0.0)


class TestTrain:
    def test_model_and_history_written(self, trained_model):
        model_path = Path(trained_model)
        assert model_path.exists()
        history = model_path.with_suffix(".history.csv")
        assert history.exists()
        rows = history.read_text().splitlines()
        assert rows[0].startswith("round,")
        assert len(rows) == 2  # header + one round

    def test_reload_scores_identical(self, trained_model):
        model = load_model(trained_model)
        rng = np.random.default_rng(0)
        probe = rng.normal(0, 1, size=(20, 16))
        s1 = score_stream(model, probe)
        s2 = score_stream(load_model(trained_model), probe)
        assert np.array_equal(s1, s2)

    def test_train_byte_identical(self, smoke_config, tmp_path):
        outs = []
        for name in ("m1.txt", "m2.txt"):
            out = tmp_path / name
            rc = main(["train", "--config", smoke_config, "--seed", "2",
                       "--out", str(out)])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestCalibrate:
    def test_recalibration_updates_tau(self, smoke_config, trained_model, tmp_path):
        honest = tmp_path / "honest.ndjson"
        main(["simulate", "--config", smoke_config, "--seed", "11",
              "--out", str(honest), "--blocks", "120"])
        out = tmp_path / "recal.txt"
        rc = main(["calibrate", "--model", trained_model, "--data", str(honest),
                   "--far", "0.02", "--out", str(out)])
        assert rc == 0
        before = load_model(trained_model)
        after = load_model(out)
        assert after.calibrations == before.calibrations + 1
        assert np.isfinite(after.tau)

    def test_attacked_rows_rejected(self, smoke_config, trained_model, tmp_path):
        mixed = tmp_path / "mixed.ndjson"
        main(["simulate", "--config", smoke_config, "--seed", "12",
              "--out", str(mixed), "--blocks", "30", "--family", "mixed"])
        rc = main(["calibrate", "--model", trained_model, "--data", str(mixed),
                   "--far", "0.01", "--out", str(tmp_path / "x.txt")])
        assert rc == 2


class TestEvaluate:
    def test_metric_files_emitted(self, smoke_config, trained_model, tmp_path):
        data = tmp_path / "eval.ndjson"
        main(["simulate", "--config", smoke_config, "--seed", "13",
              "--out", str(data), "--blocks", "80", "--family", "mixed",
              "--strength", "1.0"])
        out_dir = tmp_path / "metrics"
        rc = main(["evaluate", "--model", trained_model, "--data", str(data),
                   "--config", smoke_config, "--out", str(out_dir),
                   "--far-grid", "0.01,0.05"])
        assert rc == 0
        assert (out_dir / "miss_at_far.csv").exists()
        assert (out_dir / "retained_vs_far.csv").exists()
        assert (out_dir / "latency.csv").exists()
        assert (out_dir / "importance.csv").exists()
        rows = (out_dir / "retained_vs_far.csv").read_text().splitlines()
        assert len(rows) == 3  # header + two FAR points

    def test_honest_only_dataset_retained_near_one(self, smoke_config, trained_model, tmp_path):
        data = tmp_path / "honest_eval.ndjson"
        main(["simulate", "--config", smoke_config, "--seed", "14",
              "--out", str(data), "--blocks", "200"])
        out_dir = tmp_path / "metrics_honest"
        rc = main(["evaluate", "--model", trained_model, "--data", str(data),
                   "--config", smoke_config, "--out", str(out_dir),
                   "--far-grid", "0.01,0.05"])
        assert rc == 0
        rows = (out_dir / "retained_vs_far.csv").read_text().splitlines()[1:]
        for row, far in zip(rows, (0.01, 0.05)):
            per_block_with = float(row.split(",")[3])
            assert per_block_with == pytest.approx(1.0 - far, abs=0.05)

    def test_empty_dataset_clean_error(self, trained_model, tmp_path):
        empty = tmp_path / "empty.ndjson"
        empty.write_text("")
        rc = main(["evaluate", "--model", trained_model, "--data", str(empty),
                   "--out", str(tmp_path / "m")])
        assert rc == 2


class TestAttackSearch:
    def test_log_and_best_emitted(self, smoke_config, trained_model, tmp_path, capsys):
        out = tmp_path / "search.ndjson"
        rc = main(["attack-search", "--model", trained_model, "--config", smoke_config,
                   "--family", "trojan", "--seed", "21", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 3  # one row per generation
        result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert result["best_attack"]["family"] == "trojan"
        assert result["best_loss"] >= 0.0

    def test_deterministic_best(self, smoke_config, trained_model, tmp_path, capsys):
        results = []
        for name in ("s1.ndjson", "s2.ndjson"):
            rc = main(["attack-search", "--model", trained_model, "--config",
                       smoke_config, "--family", "pns", "--seed", "8",
                       "--out", str(tmp_path / name)])
            assert rc == 0
            results.append(capsys.readouterr().out.strip().splitlines()[-1])
        assert results[0] == results[1]

    def test_unknown_family_rejected(self, smoke_config, trained_model, tmp_path):
        rc = main(["attack-search", "--model", trained_model, "--config", smoke_config,
                   "--family", "nope", "--seed", "1", "--out", str(tmp_path / "x")])
        assert rc == 2
