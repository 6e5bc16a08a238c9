"""Command-line entry points.

  fedasmu run <config.ini>      run every (strategy, seed) pair, summarize
  fedasmu summarize <dir>       re-summarize an existing run directory
  fedasmu grad-check            finite-difference oracles for all gradients
  fedasmu selftest              protocol invariant and determinism suite

Worker parallelism inside a simulation is capped by ASMU_THREADS.
"""

from __future__ import annotations

import argparse
import filecmp
import os
import sys
import tempfile

import numpy as np

from . import gradcheck
from ._kernels import backend_name
from .config import load_config, override
from .errors import FedasmuError
from .harness import (format_summary, load_run_dir, run_experiment, summarize,
                      summary_to_csv)
from .simulate import EventQueue, VirtualClock


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = tuple(range(1, args.seeds + 1))
    if args.strategy is not None:
        changes["strategies"] = (args.strategy,)
    if args.target is not None:
        changes["target_accuracy"] = args.target
    if args.out is not None:
        changes["out_dir"] = args.out
    if changes:
        cfg = override(cfg, **changes)
    print(f"kernel backend: {backend_name()}")
    paths = run_experiment(cfg, threads=args.threads)
    print(f"wrote {len(paths)} metrics logs to {cfg.out_dir}")
    report = summarize(load_run_dir(cfg.out_dir), cfg.target_accuracy)
    summary_to_csv(report, os.path.join(cfg.out_dir, "summary.csv"))
    print(format_summary(report))
    return 0


def _cmd_summarize(args) -> int:
    report = summarize(load_run_dir(args.dir), args.target)
    summary_to_csv(report, os.path.join(args.dir, "summary.csv"))
    print(format_summary(report))
    return 0


def _cmd_grad_check(args) -> int:
    results = gradcheck.run_all(args.instances, args.seed)
    failed = False
    for name, worst in results.items():
        tol = gradcheck.TOLERANCES[name]
        ok = worst <= tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err "
              f"{worst:.3e} (tolerance {tol:.0e})")
    return 1 if failed else 0


def _cmd_selftest(args) -> int:
    from .simulate import Simulation
    from .config import ExperimentConfig
    from .harness import build_data

    failures = 0

    def report(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")

    # event queue honors (time, seq) order
    clock = VirtualClock()
    q = EventQueue(clock)
    rng = np.random.default_rng(0)
    times = rng.uniform(0, 100, size=1000)
    for t in times:
        q.schedule(float(t), "Evaluate")
    popped = [q.pop() for _ in range(len(q))]
    keys = [(e.time, e.seq) for e in popped]
    report("event_queue_order", keys == sorted(keys))

    cfg = ExperimentConfig(m=8, m_prime=4, rounds=30, tau=3, n_samples=400,
                           input_dim=8, n_classes=4, parallelism_cap=0.5,
                           trigger_period=2.0, seeds=(1,))
    shards, test = build_data(cfg, 1)
    sim = Simulation(cfg.run_config("FedASMU"), cfg.model_spec(), shards, test, 1)
    sim.run()
    stale_ok = all(row["staleness"] <= cfg.tau for row in sim.server_trace)
    report("staleness_bound", stale_ok)
    alpha_ok = all(cfg.alpha_min <= row["alpha"] <= cfg.alpha_max
                   for row in sim.server_trace)
    report("alpha_range", alpha_ok)
    cap = -(-cfg.parallelism_cap * cfg.m // 1)
    report("busy_cap", sim.busy_high_water <= cap,
           f"high water {sim.busy_high_water} cap {int(cap)}")
    merged = [row["merged"] for row in sim.device_trace]
    report("single_merge_per_round", all(isinstance(v, bool) for v in merged))

    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a.csv"), os.path.join(tmp, "b.csv")
        sim1 = Simulation(cfg.run_config("FedASMU"), cfg.model_spec(), shards, test, 1)
        sim1.run().to_csv(a)
        sim2 = Simulation(cfg.run_config("FedASMU"), cfg.model_spec(), shards, test, 1)
        sim2.run().to_csv(b)
        report("determinism", filecmp.cmp(a, b, shallow=False))
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedasmu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config", nargs="?", help="config INI path")
    p_run.add_argument("--config", dest="config_flag", help="config INI path")
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--seeds", type=int, help="use seeds 1..N")
    p_run.add_argument("--strategy", help="run only this strategy")
    p_run.add_argument("--target", type=float, help="target accuracy override")
    p_run.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: ASMU_THREADS or 1)")
    p_run.set_defaults(func=_cmd_run)

    p_sum = sub.add_parser("summarize", help="summarize a run directory")
    p_sum.add_argument("dir")
    p_sum.add_argument("--target", type=float, default=0.6)
    p_sum.set_defaults(func=_cmd_summarize)

    p_grad = sub.add_parser("grad-check", help="finite-difference gradient oracles")
    p_grad.add_argument("--instances", type=int, default=20)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=_cmd_grad_check)

    p_self = sub.add_parser("selftest", help="protocol invariant suite")
    p_self.set_defaults(func=_cmd_selftest)

    args = parser.parse_args(argv)
    if args.command == "run":
        args.config = args.config_flag or args.config
        if not args.config:
            parser.error("run needs a config path (positional or --config)")
    try:
        return args.func(args)
    except FedasmuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
