"""Deterministic virtual-time event loop tying all modules together.

Events are processed in (time, seq) order from a binary heap; seq is a
global tie-break counter so the order is total. Device-round math is pure
(each round owns a private rng stream seeded by (run seed, device, round
index)) and may be computed on a worker pool, but its effects commit only
when the owning event is processed, so results are byte-identical for any
ASMU_THREADS setting.

Round timeline for a device triggered at time T0 (epoch duration e,
downlink d, uplink u, request slot l*):

    training starts            T0 + d
    epoch boundary k           T0 + d + k*e
    fresh request sent         at the start of epoch l*
    fresh response arrives     request + d
    merge consumed             first epoch boundary >= arrival
    upload arrives             T0 + d + L*e + u   (+d more when blocking)
"""

from __future__ import annotations

import heapq
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .device import (DeviceConfig, DeviceControlState, apply_fresh_model,
                     round_seed_seq, train_epochs)
from .errors import UsageError
from .selector import (MetaPolicy, QTable, SlotDecision, epsilon_schedule,
                       meta_select, meta_update, q_select, q_update)
from .server import (GlobalModelStore, ServerConfig, ServerDeviceRecord,
                     admit_upload, fresh_model_response)
from .strategies import (ServerStrategy, StrategyKnobs, check_kind,
                         device_behavior, fedavg_round, is_synchronous)
from .tasks import Dataset, ModelSpec, evaluate, first_batch_indices, init_params

# seed-stream tags (arbitrary distinct primes)
TAG_INIT = 7919
TAG_PROFILES = 15485863
TAG_TRIGGER = 32452843
TAG_SELECT = 49979687
TAG_META = 67867967


# ---------- clock and event queue ----------

class VirtualClock:
    """Monotone virtual time in seconds."""

    def __init__(self):
        self.now = 0.0

    def advance(self, t: float) -> None:
        if t < self.now:
            raise RuntimeError(f"clock rewind: {t} < {self.now}")
        self.now = t


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: str  # TriggerScan | RoundStart | FreshRequest | FreshResponse | Upload | Evaluate
    device: int | None = None
    payload: object = None


class EventQueue:
    """Min-heap over (time, seq); seq assigned at schedule time."""

    def __init__(self, clock: VirtualClock):
        self._clock = clock
        self._heap: list[tuple[float, int, SimEvent]] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: float, kind: str, device: int | None = None,
                 payload: object = None) -> SimEvent:
        if time < self._clock.now:
            raise RuntimeError(f"event scheduled in the past: {time} < {self._clock.now}")
        ev = SimEvent(time=time, seq=self._seq, kind=kind, device=device,
                      payload=payload)
        self._seq += 1
        heapq.heappush(self._heap, (ev.time, ev.seq, ev))
        return ev

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)[2]


# ---------- device profiles ----------

@dataclass(frozen=True)
class DeviceProfile:
    epoch_time: float
    uplink: float
    downlink: float


def build_profiles(m: int, heterogeneity_ratio: float, base_epoch_time: float,
                   seed: int, uplink: float = 0.0, downlink: float = 0.0) -> list[DeviceProfile]:
    """Per-device epoch durations uniform in [base, ratio*base]."""
    if heterogeneity_ratio < 1.0:
        raise UsageError("heterogeneity ratio must be >= 1")
    if base_epoch_time <= 0:
        raise UsageError("base epoch time must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, TAG_PROFILES]))
    times = rng.uniform(base_epoch_time, heterogeneity_ratio * base_epoch_time, size=m)
    return [DeviceProfile(float(t), uplink, downlink) for t in times]


# ---------- run configuration ----------

@dataclass(frozen=True)
class RunConfig:
    """Everything one simulation needs besides data and the model spec."""

    strategy: str = "FedASMU"
    m: int = 100
    m_prime: int = 10
    rounds: int = 500               # T: accepted aggregations
    tau: int = 99
    trigger_period: float = 10.0
    parallelism_cap: float = 0.1
    local_epochs: int = 5
    batch_size: int = 32
    eta_local: float = 0.05
    eval_interval: int = 5
    time_budget: float = 0.0        # 0 = unlimited
    base_epoch_time: float = 1.0
    heterogeneity_ratio: float = 5.0
    uplink: float = 0.1
    downlink: float = 0.1
    block_on_fresh: bool = False
    fedavg_fraction: float = 0.0    # 0 = use m_prime / m
    lambda0: float = 1.0
    sigma0: float = 1.0
    iota0: float = 0.0
    server: ServerConfig = ServerConfig()
    device: DeviceConfig = DeviceConfig()
    gamma0: float = 1.0
    upsilon0: float = 0.5
    rho: float = 0.9
    selector_hidden: int = 16
    eta_rl: float = 1e-3
    phi_q: float = 0.5
    psi_q: float = 0.9
    eps_warmup_rounds: int = 5
    eps_warm: float = 0.5
    eps_start: float = 0.3
    eps_end: float = 0.01
    knobs: StrategyKnobs = StrategyKnobs()
    init_scale: float = 0.01

    def validate(self) -> None:
        check_kind(self.strategy)
        if self.m < 1:
            raise UsageError("need at least one device")
        if not 1 <= self.m_prime <= self.m:
            raise UsageError("m_prime must be in [1, m]")
        if self.rounds < 1:
            raise UsageError("rounds must be >= 1")
        if self.tau < 1:
            raise UsageError("staleness bound must be >= 1")
        if self.trigger_period <= 0:
            raise UsageError("trigger period must be positive")
        if not 0.0 < self.parallelism_cap <= 1.0:
            raise UsageError("parallelism cap must be in (0, 1]")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise UsageError("local_epochs and batch_size must be >= 1")
        if self.eta_local <= 0:
            raise UsageError("eta_local must be positive")
        if self.eval_interval < 1:
            raise UsageError("eval_interval must be >= 1")
        if self.heterogeneity_ratio < 1:
            raise UsageError("heterogeneity ratio must be >= 1")
        if min(self.uplink, self.downlink) < 0 or self.time_budget < 0:
            raise UsageError("latencies and time budget must be non-negative")
        if not 0.0 <= self.fedavg_fraction <= 1.0:
            raise UsageError("fedavg_fraction must be in [0, 1]")


# ---------- metrics ----------

METRICS_COLUMNS = ("virtual_time", "global_version", "accuracy", "mean_loss",
                   "staleness_mean", "staleness_max", "discarded_total")


@dataclass(frozen=True)
class MetricsRecord:
    virtual_time: float
    global_version: int
    accuracy: float
    mean_loss: float
    staleness_mean: float
    staleness_max: int
    discarded_total: int


@dataclass
class MetricsLog:
    records: list[MetricsRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        """Atomic write: the file appears complete or not at all."""
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(",".join(METRICS_COLUMNS) + "\n")
            for r in self.records:
                fh.write(f"{r.virtual_time!r},{r.global_version},{r.accuracy!r},"
                         f"{r.mean_loss!r},{r.staleness_mean!r},{r.staleness_max},"
                         f"{r.discarded_total}\n")
        os.replace(tmp, path)

    @staticmethod
    def from_csv(path) -> "MetricsLog":
        with open(path) as fh:
            header = fh.readline().strip()
            if tuple(header.split(",")) != METRICS_COLUMNS:
                raise UsageError(f"{path}: unexpected metrics header {header!r}")
            records = []
            for line in fh:
                v = line.rstrip("\n").split(",")
                records.append(MetricsRecord(
                    float(v[0]), int(v[1]), float(v[2]), float(v[3]),
                    float(v[4]), int(v[5]), int(v[6])))
        return MetricsLog(records)

    def final_accuracy(self) -> float:
        return self.records[-1].accuracy


# ---------- worker pool plumbing ----------

class _Done:
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def result(self):
        return self.value


def resolve_threads(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, threads)
    return max(1, int(os.environ.get("ASMU_THREADS", "1")))


# ---------- active round bookkeeping ----------

@dataclass
class _ActiveRound:
    device: int
    origin: int
    round_index: int
    children: list
    decision: SlotDecision | None = None
    q_prev_slot: int | None = None
    split: int = 0                  # epochs in the pre-merge segment
    seg_a: object = None
    seg_b: object = None
    trace: dict = field(default_factory=dict)


class Simulation:
    """One seeded run of one strategy over fixed shards and test data."""

    def __init__(self, cfg: RunConfig, spec: ModelSpec, shards: list[Dataset],
                 test: Dataset, seed: int, threads: int | None = None):
        cfg.validate()
        if len(shards) != cfg.m:
            raise UsageError(f"got {len(shards)} shards for m={cfg.m}")
        if len(test) == 0:
            raise UsageError("empty test set")
        self.cfg = cfg
        self.spec = spec
        self.shards = shards
        self.test = test
        self.seed = seed
        self.threads = resolve_threads(threads)
        self.behavior = device_behavior(cfg.strategy)

        self.clock = VirtualClock()
        self.events = EventQueue(self.clock)
        w0 = init_params(spec, np.random.SeedSequence([seed, TAG_INIT]), cfg.init_scale)
        self.store = GlobalModelStore(w0, cfg.tau)
        self.records = [ServerDeviceRecord(lam=cfg.lambda0, sigma=cfg.sigma0,
                                           iota=cfg.iota0, eta_local=cfg.eta_local,
                                           epochs=cfg.local_epochs)
                        for _ in range(cfg.m)]
        self.dcs = [DeviceControlState(gamma=cfg.gamma0, upsilon=cfg.upsilon0,
                                       baseline=0.0, rho=cfg.rho)
                    for _ in range(cfg.m)]
        self.meta = MetaPolicy(cfg.selector_hidden, cfg.eta_rl,
                               np.random.SeedSequence([seed, TAG_META]))
        self.qtables: list[QTable | None] = [None] * cfg.m
        self.last_slot: list[int | None] = [None] * cfg.m
        self.selector_rngs = [np.random.default_rng(np.random.SeedSequence(
            [seed, TAG_SELECT, dev])) for dev in range(cfg.m)]
        self.trigger_rng = np.random.default_rng(
            np.random.SeedSequence([seed, TAG_TRIGGER]))
        self.profiles = build_profiles(cfg.m, cfg.heterogeneity_ratio,
                                       cfg.base_epoch_time, seed,
                                       cfg.uplink, cfg.downlink)
        self.busy = [False] * cfg.m
        self.busy_count = 0
        self.busy_high_water = 0
        self.round_counter = [0] * cfg.m
        self.active: dict[int, _ActiveRound] = {}
        self.strategy = (None if is_synchronous(cfg.strategy)
                         else ServerStrategy(cfg.strategy, cfg.server, cfg.knobs))

        self.metrics = MetricsLog()
        self.server_trace: list[dict] = []
        self.device_trace: list[dict] = []
        self.merge_counts: dict[tuple[int, int], int] = {}
        self.discarded = 0
        self._stale_sum = 0
        self._stale_n = 0
        self._stale_max = 0
        self._draining = False
        self._finished = False
        self._pool: ThreadPoolExecutor | None = None

    # -- helpers -----------------------------------------------------------

    def _submit(self, fn, *args):
        if self._pool is not None:
            return self._pool.submit(fn, *args)
        return _Done(fn(*args))

    def _epsilon(self) -> float:
        return epsilon_schedule(self.store.version, self.cfg.rounds,
                                self.cfg.eps_warmup_rounds, self.cfg.eps_warm,
                                self.cfg.eps_start, self.cfg.eps_end)

    def _note_staleness(self, staleness: int) -> None:
        self._stale_sum += staleness
        self._stale_n += 1
        self._stale_max = max(self._stale_max, staleness)

    def _record_eval(self) -> None:
        rep = evaluate(self.spec, self.store.current, self.test)
        mean = self._stale_sum / self._stale_n if self._stale_n else 0.0
        self.metrics.records.append(MetricsRecord(
            virtual_time=self.clock.now, global_version=self.store.version,
            accuracy=rep.accuracy, mean_loss=rep.mean_loss,
            staleness_mean=mean, staleness_max=self._stale_max,
            discarded_total=self.discarded))

    # -- event handlers ----------------------------------------------------

    def _on_trigger_scan(self, ev: SimEvent) -> None:
        if self._draining:
            return
        cfg = self.cfg
        idle = [dev for dev in range(cfg.m) if not self.busy[dev]]
        cap = math.ceil(cfg.parallelism_cap * cfg.m)
        room = min(cfg.m_prime, cap - self.busy_count, len(idle))
        if room > 0:
            chosen = self.trigger_rng.choice(len(idle), size=room, replace=False)
            for pick in chosen:
                dev = idle[int(pick)]
                self.busy[dev] = True
                self.busy_count += 1
                self.busy_high_water = max(self.busy_high_water, self.busy_count)
                self.events.schedule(self.clock.now, "RoundStart", dev,
                                     payload=(self.store.current.copy(),
                                              self.store.version))
        self.events.schedule(self.clock.now + cfg.trigger_period, "TriggerScan")

    def _on_round_start(self, ev: SimEvent) -> None:
        if self._draining:
            return
        cfg = self.cfg
        dev = ev.device
        w_snap, origin = ev.payload
        prof = self.profiles[dev]
        round_index = self.round_counter[dev]
        self.round_counter[dev] += 1
        epochs = cfg.local_epochs
        children = round_seed_seq(self.seed, dev, round_index).spawn(epochs)
        ar = _ActiveRound(device=dev, origin=origin, round_index=round_index,
                          children=children)
        ar.trace = {"device": dev, "o": origin, "l_star": None, "g": None,
                    "staleness": None, "beta": None, "reward": None,
                    "loss_before": None, "loss_after": None, "merged": False,
                    "accepted": None}

        t_begin = self.clock.now + prof.downlink
        consume = None
        if self.behavior.fresh_request and epochs >= 2:
            eps = self._epsilon()
            if round_index == 0:
                decision = meta_select(self.meta, epochs, eps,
                                       self.selector_rngs[dev])
            else:
                if self.qtables[dev] is None:
                    self.qtables[dev] = QTable(epochs - 1, cfg.phi_q, cfg.psi_q)
                ar.q_prev_slot = self.last_slot[dev]
                decision = q_select(self.qtables[dev], ar.q_prev_slot, eps,
                                    self.selector_rngs[dev])
            ar.decision = decision
            self.last_slot[dev] = decision.l_star
            ar.trace["l_star"] = decision.l_star
            if cfg.block_on_fresh:
                consume = decision.l_star - 1
            else:
                lag = math.ceil(prof.downlink / prof.epoch_time - 1e-12)
                consume = decision.l_star - 1 + lag
            t_req = t_begin + (decision.l_star - 1) * prof.epoch_time
            self.events.schedule(t_req, "FreshRequest", dev,
                                 payload=(origin, decision.l_star))
        ar.split = consume if (consume is not None and consume < epochs) else epochs
        ar.seg_a = self._submit(train_epochs, self.spec, w_snap,
                                self.shards[dev], cfg.eta_local, cfg.batch_size,
                                children[: ar.split])
        duration = epochs * prof.epoch_time
        if ar.decision is not None and cfg.block_on_fresh:
            duration += prof.downlink
        self.events.schedule(t_begin + duration + prof.uplink, "Upload", dev,
                             payload=origin)
        self.active[dev] = ar

    def _on_fresh_request(self, ev: SimEvent) -> None:
        if self._draining:
            return
        origin, _l_star = ev.payload
        resp = fresh_model_response(self.store, origin)
        prof = self.profiles[ev.device]
        self.events.schedule(ev.time + prof.downlink, "FreshResponse",
                             ev.device, payload=resp)

    def _on_fresh_response(self, ev: SimEvent) -> None:
        if self._draining:
            return
        dev = ev.device
        ar = self.active.get(dev)
        if ar is None:
            return
        cfg = self.cfg
        epochs = cfg.local_epochs
        if ev.payload is not None:
            ar.trace["g"] = ev.payload[1]
        if ev.payload is not None and ar.split < epochs:
            w_g, g = ev.payload
            w_pre = ar.seg_a.result()
            batch = self.shards[dev].take(first_batch_indices(
                len(self.shards[dev]), cfg.batch_size,
                np.random.default_rng(ar.children[ar.split])))
            res = apply_fresh_model(self.spec, w_pre, w_g, g, ar.origin,
                                    self.dcs[dev], batch, cfg.device,
                                    self.behavior.adapt_merge_controls)
            key = (dev, ar.round_index)
            self.merge_counts[key] = self.merge_counts.get(key, 0) + 1
            self.dcs[dev] = res.dcs
            if ar.round_index == 0:
                meta_update(self.meta, ar.decision, res.reward,
                            self.dcs[dev].baseline)
            elif ar.q_prev_slot is not None:
                q_update(self.qtables[dev], ar.q_prev_slot, ar.decision.action,
                         ar.decision.l_star, res.reward, cfg.phi_q, cfg.psi_q)
            ar.trace.update(staleness=g - ar.origin + 1, beta=res.beta,
                            reward=res.reward, loss_before=res.loss_before,
                            loss_after=res.loss_after, merged=True)
            ar.seg_b = self._submit(train_epochs, self.spec, res.w,
                                    self.shards[dev], cfg.eta_local,
                                    cfg.batch_size, ar.children[ar.split:])
        elif ar.split < epochs:
            # no newer model: finish the remaining epochs unmerged
            ar.seg_b = self._submit(train_epochs, self.spec, ar.seg_a.result(),
                                    self.shards[dev], cfg.eta_local,
                                    cfg.batch_size, ar.children[ar.split:])

    def _on_upload(self, ev: SimEvent) -> None:
        dev = ev.device
        ar = self.active.pop(dev, None)
        self.busy[dev] = False
        self.busy_count -= 1
        if self._draining or ar is None:
            return
        cfg = self.cfg
        origin = ev.payload
        pending = ar.seg_b if ar.seg_b is not None else ar.seg_a
        w_final = pending.result()
        t = self.store.version
        if not admit_upload(t, origin, cfg.tau):
            self.discarded += 1
            ar.trace["accepted"] = False
            self.device_trace.append(ar.trace)
            return
        self._note_staleness(t - origin + 1)
        outcome, rec, trace = self.strategy.aggregate(
            self.store, self.records[dev], w_final, origin)
        self.records[dev] = rec
        ar.trace["accepted"] = True
        self.device_trace.append(ar.trace)
        if outcome is None:
            return
        trace["device"] = dev
        self.server_trace.append(trace)
        version = outcome.new_version
        if version >= cfg.rounds:
            self._draining = True
            self.events.schedule(self.clock.now, "Evaluate")
        elif version % cfg.eval_interval == 0:
            self.events.schedule(self.clock.now, "Evaluate")

    def _on_evaluate(self, ev: SimEvent) -> None:
        self._record_eval()
        if self._draining:
            self._finished = True

    # -- drivers -----------------------------------------------------------

    def run(self) -> MetricsLog:
        if is_synchronous(self.cfg.strategy):
            self._run_sync()
            return self.metrics
        handlers = {
            "TriggerScan": self._on_trigger_scan,
            "RoundStart": self._on_round_start,
            "FreshRequest": self._on_fresh_request,
            "FreshResponse": self._on_fresh_response,
            "Upload": self._on_upload,
            "Evaluate": self._on_evaluate,
        }
        self.events.schedule(0.0, "Evaluate")
        self.events.schedule(0.0, "TriggerScan")
        pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self._pool = pool
        try:
            budget = self.cfg.time_budget
            while len(self.events) and not self._finished:
                ev = self.events.pop()
                if budget > 0 and ev.time > budget:
                    self._record_eval()
                    break
                self.clock.advance(ev.time)
                handlers[ev.kind](ev)
        finally:
            self._pool = None
            if pool is not None:
                pool.shutdown(wait=False, cancel_futures=True)
        return self.metrics

    def _run_sync(self) -> None:
        cfg = self.cfg
        frac = cfg.fedavg_fraction
        k = cfg.m_prime if frac == 0.0 else max(1, int(round(frac * cfg.m)))
        k = min(k, cfg.m)
        self._record_eval()
        for r in range(cfg.rounds):
            selected = [int(d) for d in
                        self.trigger_rng.choice(cfg.m, size=k, replace=False)]
            new_w, duration = fedavg_round(
                self.spec, self.shards, self.store.current, selected,
                self.profiles, cfg.eta_local, cfg.local_epochs,
                cfg.batch_size, self.seed, r)
            self.clock.advance(self.clock.now + duration)
            version = self.store.push(new_w)
            self._note_staleness(1)
            self.server_trace.append({"t": version, "device": -1, "o": version - 1,
                                      "staleness": 1, "alpha": 1.0 / k,
                                      "lambda": cfg.lambda0, "sigma": cfg.sigma0,
                                      "iota": cfg.iota0})
            if version % cfg.eval_interval == 0 or version >= cfg.rounds:
                self._record_eval()
            if cfg.time_budget > 0 and self.clock.now > cfg.time_budget:
                if version % cfg.eval_interval != 0:
                    self._record_eval()
                break

    # -- trace output ------------------------------------------------------

    def dump_traces(self, trace_dir) -> None:
        os.makedirs(trace_dir, exist_ok=True)
        with open(os.path.join(trace_dir, "server_trace.jsonl"), "w") as fh:
            for row in self.server_trace:
                fh.write(json.dumps(row) + "\n")
        with open(os.path.join(trace_dir, "device_trace.jsonl"), "w") as fh:
            for row in self.device_trace:
                fh.write(json.dumps(row) + "\n")
        state = {
            "meta_policy": self.meta.get_flat().tolist(),
            "last_slot": self.last_slot,
            "q_tables": [t.values.tolist() if t is not None else None
                         for t in self.qtables],
        }
        with open(os.path.join(trace_dir, "selector_state.json"), "w") as fh:
            json.dump(state, fh, indent=2)


def run_simulation(cfg: RunConfig, spec: ModelSpec, shards: list[Dataset],
                   test: Dataset, seed: int, threads: int | None = None,
                   trace_dir=None) -> MetricsLog:
    """Convenience wrapper: build, run, optionally dump debug traces."""
    sim = Simulation(cfg, spec, shards, test, seed, threads)
    log = sim.run()
    if trace_dir is not None:
        sim.dump_traces(trace_dir)
    return log
