"""Pluggable aggregation/merge policies.

One strategy kind selects both the server aggregation rule and the device
behavior flags. The full method, its three ablations and three baselines:

  FedASMU     dynamic server weights + fresh-model merge with adaptive beta
  FedASMU-DA  fresh-model merge kept, all control parameters frozen at init
  FedASMU-FA  dynamic server weights, no fresh-model requests
  FedASMU-0   neither (staleness-bounded FedAsync with the polynomial weight)
  FedAsync    alpha = alpha0 * staleness^(-a), staleness-bounded
  FedBuff     buffer K admitted uploads, mix their mean at weight alpha0
  FedAvg      synchronous data-size-weighted mean (separate driver)

All asynchronous kinds share the same staleness admission gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .device import round_seed_seq, train_epochs
from .errors import UsageError
from .params import mix
from .server import (AggregationOutcome, GlobalModelStore, ServerConfig,
                     ServerDeviceRecord, aggregate_upload)

STRATEGY_KINDS = ("FedASMU", "FedASMU-DA", "FedASMU-FA", "FedASMU-0",
                  "FedAvg", "FedAsync", "FedBuff")
ASYNC_KINDS = tuple(k for k in STRATEGY_KINDS if k != "FedAvg")


@dataclass(frozen=True)
class StrategyKnobs:
    fedasync_exponent: float = 0.5
    fedasync_alpha0: float = 0.6
    fedbuff_buffer: int = 10


@dataclass(frozen=True)
class DeviceBehavior:
    fresh_request: bool
    adapt_merge_controls: bool


def check_kind(kind: str) -> str:
    if kind not in STRATEGY_KINDS:
        raise UsageError(f"unknown strategy {kind!r}; choose from {STRATEGY_KINDS}")
    return kind


def device_behavior(kind: str) -> DeviceBehavior:
    check_kind(kind)
    if kind == "FedASMU":
        return DeviceBehavior(fresh_request=True, adapt_merge_controls=True)
    if kind == "FedASMU-DA":
        return DeviceBehavior(fresh_request=True, adapt_merge_controls=False)
    return DeviceBehavior(fresh_request=False, adapt_merge_controls=False)


def server_dynamic(kind: str) -> bool:
    """Whether the server adapts (lambda, sigma, iota) per upload."""
    return kind in ("FedASMU", "FedASMU-FA")


def is_synchronous(kind: str) -> bool:
    return kind == "FedAvg"


class ServerStrategy:
    """Server aggregation dispatch; owns FedBuff's pending buffer."""

    def __init__(self, kind: str, server_cfg: ServerConfig, knobs: StrategyKnobs):
        self.kind = check_kind(kind)
        if is_synchronous(kind):
            raise UsageError("FedAvg runs under the synchronous driver")
        self.cfg = server_cfg
        self.knobs = knobs
        self._buffer: list[np.ndarray] = []

    def aggregate(self, store: GlobalModelStore, rec: ServerDeviceRecord,
                  w_up: np.ndarray, o: int):
        """Aggregate one admitted upload.

        Returns (outcome, record, trace) or (None, record, None) when the
        upload was only buffered (FedBuff below capacity).
        """
        t = store.version
        staleness = t - o + 1
        if self.kind in ("FedASMU", "FedASMU-FA", "FedASMU-DA", "FedASMU-0"):
            return aggregate_upload(store, rec, w_up, o, self.cfg,
                                    dynamic=server_dynamic(self.kind))
        if self.kind == "FedAsync":
            alpha = self.knobs.fedasync_alpha0 * staleness ** (-self.knobs.fedasync_exponent)
            alpha = min(max(alpha, self.cfg.alpha_min), self.cfg.alpha_max)
            new_version = store.push(mix(alpha, store.current, w_up))
            outcome = AggregationOutcome(True, alpha, staleness, new_version)
            trace = {"t": new_version, "o": o, "staleness": staleness,
                     "alpha": alpha, "lambda": rec.lam, "sigma": rec.sigma,
                     "iota": rec.iota}
            return outcome, rec, trace
        # FedBuff: accumulate, aggregate the buffer mean when full
        self._buffer.append(w_up.copy())
        if len(self._buffer) < self.knobs.fedbuff_buffer:
            return None, rec, None
        mean = np.mean(self._buffer, axis=0)
        self._buffer.clear()
        alpha = min(max(self.knobs.fedasync_alpha0, self.cfg.alpha_min), self.cfg.alpha_max)
        new_version = store.push(mix(alpha, store.current, mean))
        outcome = AggregationOutcome(True, alpha, staleness, new_version)
        trace = {"t": new_version, "o": o, "staleness": staleness, "alpha": alpha,
                 "lambda": rec.lam, "sigma": rec.sigma, "iota": rec.iota}
        return outcome, rec, trace


# ---------- synchronous baseline ----------

def fedavg_aggregate(models: list[np.ndarray], sizes: list[int]) -> np.ndarray:
    """Data-size-weighted mean of device models."""
    if not models:
        raise UsageError("need at least one selected device")
    total = float(sum(sizes))
    out = np.zeros_like(models[0])
    for w, n in zip(models, sizes):
        out += (n / total) * w
    return out


def fedavg_round(spec, shards, w_global: np.ndarray, selected, profiles,
                 eta: float, epochs: int, batch_size: int, seed: int,
                 round_index: int):
    """One synchronous round over the selected devices.

    Every device trains the full epoch budget from the same global model;
    the round lasts as long as its slowest member (straggler barrier).
    Returns (new_global, duration).
    """
    models, sizes, duration = [], [], 0.0
    for dev in selected:
        children = round_seed_seq(seed, int(dev), round_index).spawn(epochs)
        models.append(train_epochs(spec, w_global, shards[dev], eta,
                                   batch_size, children))
        sizes.append(len(shards[dev]))
        prof = profiles[dev]
        duration = max(duration, prof.downlink + epochs * prof.epoch_time + prof.uplink)
    return fedavg_aggregate(models, sizes), duration
