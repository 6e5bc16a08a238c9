"""Device-side training round with adaptive fresh-model aggregation.

A round runs L local epochs of mini-batch SGD. At a selected epoch the
device requests a fresh global model; on arrival it merges

    w <- (1 - beta) * w + beta * w_fresh,
    phi  = gamma / sqrt(g) * (1 - upsilon / sqrt(g - o + 1))
    beta = mu_beta * phi / (1 + mu_beta * phi)          (clamped to [0, beta_max])

measures the loss change on the next training batch as the merge reward,
and adapts (gamma, upsilon) plus the reward baseline. Each round's
randomness derives from one seed sequence, one child per epoch, so runs are
pure functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ProtocolError, UsageError
from .params import dot, mix
from .tasks import Dataset, ModelSpec, first_batch_indices, loss_and_grad, sgd_epoch

_ROUND_TAG = 104729  # disambiguates round streams from other seeded streams


def round_seed_seq(seed: int, device_id: int, round_index: int) -> np.random.SeedSequence:
    """Private rng stream of one device round; shared with oracle tests."""
    return np.random.SeedSequence([seed, _ROUND_TAG, device_id, round_index])


@dataclass(frozen=True)
class DeviceConfig:
    """Hyper-parameters and clamp ranges for the merge-weight adaptation."""

    mu_beta: float = 1.0
    eta_gamma: float = 1e-4
    eta_upsilon: float = 1e-4
    beta_max: float = 0.9
    gamma_bounds: tuple[float, float] = (1e-3, 1e3)
    upsilon_bounds: tuple[float, float] = (0.0, 5.0)


@dataclass(frozen=True)
class DeviceControlState:
    """Per-device merge-weight controls, reward baseline and round counter."""

    gamma: float = 1.0
    upsilon: float = 0.5
    baseline: float = 0.0
    merge_count: int = 0
    rho: float = 0.9


@dataclass
class LocalTrainingState:
    """In-round model state; at most one fresh merge per round."""

    w: np.ndarray
    origin: int
    epoch: int = 0
    fresh_merged: bool = False
    l_star: int | None = None


@dataclass(frozen=True)
class RoundParams:
    eta_local: float
    epochs: int
    batch_size: int
    consume_delay_epochs: int = 0
    adapt_controls: bool = True
    device_cfg: DeviceConfig = DeviceConfig()


@dataclass(frozen=True)
class MergeResult:
    w: np.ndarray
    dcs: DeviceControlState
    phi: float
    beta: float
    reward: float
    loss_before: float
    loss_after: float


def compute_beta(dcs: DeviceControlState, g: int, o: int, mu_beta: float,
                 cfg: DeviceConfig | None = None) -> tuple[float, float]:
    """Merge weight for a fresh model of version g against base version o."""
    if g < 1 or o < 0 or g < o:
        raise UsageError(f"need g >= max(o, 1), got g={g}, o={o}")
    if mu_beta <= 0:
        raise UsageError("mu_beta must be positive")
    cfg = cfg or DeviceConfig(mu_beta=mu_beta)
    phi = dcs.gamma / math.sqrt(g) * (1.0 - dcs.upsilon / math.sqrt(g - o + 1))
    if phi <= 0.0:
        return phi, 0.0
    beta = mu_beta * phi / (1.0 + mu_beta * phi)
    return phi, min(beta, cfg.beta_max)


def merge_fresh(state: LocalTrainingState, w_g: np.ndarray, beta: float) -> LocalTrainingState:
    """Mix the fresh global model into the local model, once per round."""
    if state.fresh_merged:
        raise ProtocolError("fresh model already merged this round")
    state.w = mix(beta, state.w, w_g)
    state.fresh_merged = True
    return state


def device_control_gradients(dcs: DeviceControlState, grad_local: np.ndarray,
                             w_g: np.ndarray, w_a: np.ndarray, g: int, o: int,
                             mu_beta: float) -> tuple[float, float]:
    """Loss gradients w.r.t. (gamma, upsilon) through the merge-weight chain.

    grad_local is the local loss gradient at the post-merge model; w_a is the
    pre-merge local model.
    """
    if g < max(o, 1):
        raise UsageError("need g >= max(o, 1)")
    stale_root = math.sqrt(g - o + 1)
    phi = dcs.gamma / math.sqrt(g) * (1.0 - dcs.upsilon / stale_root)
    denom = math.sqrt(g) * (1.0 + mu_beta * phi) ** 2
    pull = dot(w_g - w_a, grad_local)
    d_gamma = pull * mu_beta / denom * (1.0 - dcs.upsilon / stale_root)
    d_upsilon = -pull * mu_beta * dcs.gamma / (denom * stale_root)
    return d_gamma, d_upsilon


def update_device_controls(dcs: DeviceControlState, grads: tuple[float, float],
                           etas: tuple[float, float],
                           cfg: DeviceConfig) -> DeviceControlState:
    """Gradient-descent step on (gamma, upsilon), then clamp."""
    if min(etas) < 0:
        raise UsageError("control learning rates must be non-negative")
    gamma = dcs.gamma - etas[0] * grads[0]
    upsilon = dcs.upsilon - etas[1] * grads[1]
    lo, hi = cfg.gamma_bounds
    gamma = min(max(gamma, lo), hi)
    lo, hi = cfg.upsilon_bounds
    upsilon = min(max(upsilon, lo), hi)
    return replace(dcs, gamma=gamma, upsilon=upsilon)


def compute_reward(loss_before: float, loss_after: float) -> float:
    """Merge reward: positive when the fresh model lowered the loss."""
    if not (math.isfinite(loss_before) and math.isfinite(loss_after)):
        raise UsageError("losses must be finite")
    return loss_before - loss_after


def update_reward_baseline(dcs: DeviceControlState, reward: float,
                           rho: float) -> DeviceControlState:
    """Exponential moving average b <- (1-rho)*b + rho*R."""
    if not 0.0 <= rho <= 1.0:
        raise UsageError("rho must be in [0, 1]")
    return replace(dcs, baseline=(1.0 - rho) * dcs.baseline + rho * reward)


def apply_fresh_model(spec: ModelSpec, w_local: np.ndarray, w_g: np.ndarray,
                      g: int, o: int, dcs: DeviceControlState,
                      eval_batch: Dataset, cfg: DeviceConfig,
                      adapt_controls: bool = True) -> MergeResult:
    """The full merge bookkeeping at one epoch boundary.

    Pure: returns the merged model, updated control state (baseline and merge
    counter always advance; gamma/upsilon only when adapt_controls) and the
    reward measured on the supplied batch.
    """
    loss_before, _ = loss_and_grad(spec, w_local, eval_batch)
    phi, beta = compute_beta(dcs, g, o, cfg.mu_beta, cfg)
    state = merge_fresh(LocalTrainingState(w=w_local.copy(), origin=o), w_g, beta)
    loss_after, grad_local = loss_and_grad(spec, state.w, eval_batch)
    if adapt_controls:
        grads = device_control_gradients(dcs, grad_local, w_g, w_local, g, o, cfg.mu_beta)
        dcs = update_device_controls(dcs, grads, (cfg.eta_gamma, cfg.eta_upsilon), cfg)
    reward = compute_reward(loss_before, loss_after)
    dcs = update_reward_baseline(dcs, reward, dcs.rho)
    dcs = replace(dcs, merge_count=dcs.merge_count + 1)
    return MergeResult(w=state.w, dcs=dcs, phi=phi, beta=beta, reward=reward,
                       loss_before=loss_before, loss_after=loss_after)


def train_epochs(spec: ModelSpec, w: np.ndarray, shard: Dataset, eta: float,
                 batch_size: int, epoch_seeds) -> np.ndarray:
    """Chain sgd_epoch over the given per-epoch seed-sequence children."""
    for child in epoch_seeds:
        w = sgd_epoch(spec, w, shard, eta, batch_size, np.random.default_rng(child))
    return w


def run_local_round(spec: ModelSpec, shard: Dataset, w_start: np.ndarray,
                    origin: int, params: RoundParams, dcs: DeviceControlState,
                    decision, fresh_source,
                    seed_seq: np.random.SeedSequence):
    """One complete device round (in-process composition).

    decision: SlotDecision with the request slot, or None for a plain SGD
    round. fresh_source(origin) is called at the slot's epoch start and may
    return (w_fresh, version) or None. The response is consumed
    ``consume_delay_epochs`` epoch boundaries later (0 = immediately, the
    zero-latency behavior). Returns (w_final, origin, trace, dcs).
    """
    if len(shard) == 0:
        raise UsageError("cannot train on an empty shard")
    epochs = params.epochs
    children = seed_seq.spawn(epochs)
    trace = {
        "o": origin, "l_star": decision.l_star if decision else None,
        "g": None, "staleness": None, "beta": None, "reward": None,
        "loss_before": None, "loss_after": None, "merged": False,
    }
    w = w_start
    pending = None
    merge_epoch = None
    for epoch in range(1, epochs + 1):
        if decision is not None and epoch == decision.l_star:
            pending = fresh_source(origin)
            merge_epoch = decision.l_star + params.consume_delay_epochs
            if pending is not None:
                trace["g"] = pending[1]
        if pending is not None and epoch == merge_epoch:
            w_g, g = pending
            batch = shard.take(first_batch_indices(
                len(shard), params.batch_size, np.random.default_rng(children[epoch - 1])))
            result = apply_fresh_model(spec, w, w_g, g, origin, dcs, batch,
                                       params.device_cfg, params.adapt_controls)
            w, dcs = result.w, result.dcs
            trace.update(staleness=g - origin + 1, beta=result.beta,
                         reward=result.reward, loss_before=result.loss_before,
                         loss_after=result.loss_after, merged=True)
            pending = None
        w = sgd_epoch(spec, w, shard, params.eta_local, params.batch_size,
                      np.random.default_rng(children[epoch - 1]))
    return w, origin, trace, dcs
