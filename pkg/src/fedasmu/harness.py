"""Experiment execution, metrics persistence and summary analytics.

One experiment = (strategies x seeds) simulations over per-seed datasets.
Every run seed derives the dataset, the partition, the device profiles and
all simulation streams, so a strategy comparison at one seed is paired and
the whole experiment is reproducible from the config file alone.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from ._kernels import backend_name
from .config import ExperimentConfig, config_hash, dump_config
from .errors import UsageError
from .simulate import MetricsLog, run_simulation
from .tasks import dirichlet_partition, generate_synthetic, split_holdout

TAG_DATA = 86028121
TAG_SPLIT = 122949823
TAG_PART = 141650939

_PACKAGE_VERSION = "0.1.0"


def build_data(cfg: ExperimentConfig, seed: int):
    """Dataset, shards and held-out test split for one run seed."""
    data = generate_synthetic(cfg.n_samples, cfg.input_dim, cfg.n_classes,
                              cfg.class_sep,
                              np.random.SeedSequence([seed, TAG_DATA]))
    train, test = split_holdout(data, cfg.test_fraction,
                                np.random.SeedSequence([seed, TAG_SPLIT]))
    shards = dirichlet_partition(train, cfg.m, cfg.dirichlet_alpha,
                                 np.random.SeedSequence([seed, TAG_PART]))
    return shards, test


def log_filename(strategy: str, seed: int) -> str:
    return f"{strategy}_seed{seed}.csv"


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   threads: int | None = None) -> list[str]:
    """Run every (strategy, seed) pair; returns the metrics CSV paths.

    CSVs are written atomically; a manifest records the config, its hash and
    the active kernel backend.
    """
    cfg.validate()
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    spec = cfg.model_spec()
    paths = []
    for seed in cfg.seeds:
        shards, test = build_data(cfg, seed)
        for strategy in cfg.strategies:
            log = run_simulation(cfg.run_config(strategy), spec, shards, test,
                                 seed, threads)
            path = os.path.join(out_dir, log_filename(strategy, seed))
            log.to_csv(path)
            paths.append(path)
    manifest = {
        "config_hash": config_hash(cfg),
        "config": dump_config(cfg),
        "strategies": list(cfg.strategies),
        "seeds": list(cfg.seeds),
        "kernel_backend": backend_name(),
        "package_version": _PACKAGE_VERSION,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return paths


def time_to_target(log: MetricsLog, target: float) -> float | None:
    """First virtual time at which test accuracy reaches the target."""
    if not log.records:
        raise UsageError("empty metrics log")
    for rec in log.records:
        if rec.accuracy >= target:
            return rec.virtual_time
    return None


@dataclass(frozen=True)
class StrategySummary:
    strategy: str
    final_accuracy: float          # median over seeds
    time_to_target: float | None   # median; None when the median run misses
    discarded: float               # median of final discarded counts
    n_seeds: int


@dataclass(frozen=True)
class SummaryReport:
    target_accuracy: float
    rows: tuple


def _median(values):
    return float(np.median(np.asarray(values, dtype=np.float64)))


def summarize(logs_by_strategy: dict[str, list[MetricsLog]],
              target_accuracy: float) -> SummaryReport:
    """Medians across seeds per strategy; missing targets map to None."""
    rows = []
    for strategy, logs in logs_by_strategy.items():
        if not logs:
            raise UsageError(f"no logs for strategy {strategy}")
        finals = [log.final_accuracy() for log in logs]
        times = [time_to_target(log, target_accuracy) for log in logs]
        med_time = _median([t if t is not None else np.inf for t in times])
        rows.append(StrategySummary(
            strategy=strategy,
            final_accuracy=_median(finals),
            time_to_target=None if not np.isfinite(med_time) else med_time,
            discarded=_median([log.records[-1].discarded_total for log in logs]),
            n_seeds=len(logs)))
    return SummaryReport(target_accuracy=target_accuracy, rows=tuple(rows))


def load_run_dir(out_dir) -> dict[str, list[MetricsLog]]:
    """Group the metrics CSVs of a run directory by strategy name."""
    logs: dict[str, list[MetricsLog]] = {}
    for name in sorted(os.listdir(out_dir)):
        if not name.endswith(".csv") or "_seed" not in name:
            continue
        strategy = name.rsplit("_seed", 1)[0]
        logs.setdefault(strategy, []).append(
            MetricsLog.from_csv(os.path.join(out_dir, name)))
    if not logs:
        raise UsageError(f"no metrics CSVs found under {out_dir}")
    return logs


def format_summary(report: SummaryReport) -> str:
    """Human-readable table; '/' marks strategies that miss the target."""
    lines = [f"target accuracy: {report.target_accuracy}",
             f"{'strategy':<12} {'seeds':>5} {'final_acc':>10} "
             f"{'time_to_target':>15} {'discarded':>10}"]
    for row in report.rows:
        t = "/" if row.time_to_target is None else f"{row.time_to_target:.1f}"
        lines.append(f"{row.strategy:<12} {row.n_seeds:>5} "
                     f"{row.final_accuracy:>10.4f} {t:>15} {row.discarded:>10.0f}")
    return "\n".join(lines)


def summary_to_csv(report: SummaryReport, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("strategy,n_seeds,final_accuracy,time_to_target,discarded\n")
        for row in report.rows:
            t = "" if row.time_to_target is None else repr(row.time_to_target)
            fh.write(f"{row.strategy},{row.n_seeds},{row.final_accuracy!r},"
                     f"{t},{row.discarded!r}\n")
    os.replace(tmp, path)
