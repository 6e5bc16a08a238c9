import json
import os

import numpy as np
import pytest

from fedasmu.config import ExperimentConfig, override
from fedasmu.errors import UsageError
from fedasmu.harness import (build_data, format_summary, load_run_dir,
                             run_experiment, summarize, summary_to_csv,
                             time_to_target)
from fedasmu.simulate import MetricsLog, MetricsRecord


def tiny_cfg(**kw):
    base = dict(m=5, m_prime=2, rounds=10, tau=5, n_samples=200, input_dim=5,
                n_classes=3, parallelism_cap=0.5, trigger_period=2.0,
                local_epochs=3, seeds=(1, 2, 3), strategies=("FedASMU",),
                class_sep=2.0, eval_interval=2)
    base.update(kw)
    return ExperimentConfig(**base)


def staircase(points):
    return MetricsLog([MetricsRecord(t, i, acc, 1.0, 1.0, 1, 0)
                       for i, (t, acc) in enumerate(points)])


class TestRunExperiment:
    def test_file_layout(self, tmp_path):
        cfg = tiny_cfg(strategies=("FedASMU", "FedAsync"))
        paths = run_experiment(cfg, out_dir=tmp_path)
        assert len(paths) == 6  # 2 strategies x 3 seeds
        names = sorted(os.path.basename(p) for p in paths)
        assert names[0] == "FedASMU_seed1.csv"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["strategies"] == ["FedASMU", "FedAsync"]
        assert manifest["kernel_backend"] in ("compiled", "python")

    def test_rerun_reproduces_bytes(self, tmp_path):
        cfg = tiny_cfg(seeds=(1,))
        p1 = run_experiment(cfg, out_dir=tmp_path / "a")
        p2 = run_experiment(cfg, out_dir=tmp_path / "b")
        for a, b in zip(p1, p2):
            assert open(a, "rb").read() == open(b, "rb").read()

    def test_interrupted_run_leaves_no_partial_csv(self, tmp_path, monkeypatch):
        import fedasmu.simulate as sim_mod
        real_replace = os.replace
        calls = {"n": 0}

        def failing_replace(src, dst):
            calls["n"] += 1
            if calls["n"] == 2:
                raise OSError("disk went away")
            return real_replace(src, dst)

        monkeypatch.setattr(sim_mod.os, "replace", failing_replace)
        cfg = tiny_cfg(seeds=(1, 2))
        with pytest.raises(OSError):
            run_experiment(cfg, out_dir=tmp_path)
        finished = [n for n in os.listdir(tmp_path) if n.endswith(".csv")]
        assert len(finished) == 1  # the second file never appeared, even partially
        for name in finished:
            MetricsLog.from_csv(tmp_path / name)  # parseable, complete

    def test_build_data_is_seeded(self):
        cfg = tiny_cfg()
        a_shards, a_test = build_data(cfg, 5)
        b_shards, b_test = build_data(cfg, 5)
        assert np.array_equal(a_test.features, b_test.features)
        for a, b in zip(a_shards, b_shards):
            assert np.array_equal(a.features, b.features)


class TestTimeToTarget:
    def test_target_zero_is_first_sample(self):
        log = staircase([(0.0, 0.1), (10.0, 0.5)])
        assert time_to_target(log, 0.0) == 0.0

    def test_impossible_target(self):
        log = staircase([(0.0, 0.1), (10.0, 0.5)])
        assert time_to_target(log, 1.1) is None

    def test_staircase_crossing(self):
        log = staircase([(0.0, 0.1), (60.0, 0.4), (120.0, 0.62), (180.0, 0.7)])
        assert time_to_target(log, 0.6) == 120.0

    def test_empty_log_rejected(self):
        with pytest.raises(UsageError):
            time_to_target(MetricsLog([]), 0.5)


class TestSummarize:
    def test_single_seed_median_is_that_run(self):
        log = staircase([(0.0, 0.1), (50.0, 0.65)])
        report = summarize({"FedASMU": [log]}, 0.6)
        row = report.rows[0]
        assert row.final_accuracy == pytest.approx(0.65)
        assert row.time_to_target == 50.0

    def test_median_of_three(self):
        logs = [staircase([(0.0, a)]) for a in (0.5, 0.7, 0.6)]
        report = summarize({"X": logs}, 0.99)
        assert report.rows[0].final_accuracy == pytest.approx(0.6)
        assert report.rows[0].time_to_target is None

    def test_missing_target_renders_slash(self):
        logs = [staircase([(0.0, 0.2)])]
        report = summarize({"XYZ": logs}, 0.9)
        text = format_summary(report)
        assert "/" in text and "XYZ" in text

    def test_csv_and_reload(self, tmp_path):
        cfg = tiny_cfg(seeds=(1, 2))
        run_experiment(cfg, out_dir=tmp_path)
        logs = load_run_dir(tmp_path)
        assert set(logs) == {"FedASMU"} and len(logs["FedASMU"]) == 2
        report = summarize(logs, cfg.target_accuracy)
        out = tmp_path / "summary.csv"
        summary_to_csv(report, out)
        lines = out.read_text().splitlines()
        assert lines[0].startswith("strategy,")
        assert len(lines) == 2


class TestManifestHash:
    def test_hash_tracks_semantics(self, tmp_path):
        cfg = tiny_cfg()
        run_experiment(cfg, out_dir=tmp_path / "a")
        run_experiment(override(cfg, rounds=cfg.rounds + 1), out_dir=tmp_path / "b")
        ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["config_hash"]
        hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
        assert ha != hb
