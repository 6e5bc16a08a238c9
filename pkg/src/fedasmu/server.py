"""Server-side aggregation state machine.

Implements staleness gating, the dynamic polynomial upload weight

    xi = lambda / (sqrt(t) * staleness^sigma) + iota
    alpha = mu_alpha * xi / (1 + mu_alpha * xi)        (clamped)

and the per-device control-parameter adaptation driven by loss-surrogate
gradients built from the device's previous upload. Each accepted upload
mixes into the global model and bumps its version; a short ring of
versioned snapshots feeds the gradient bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ProtocolError, UsageError
from .params import dot, mix


@dataclass(frozen=True)
class ServerConfig:
    """Hyper-parameters and clamp ranges for the aggregation side."""

    mu_alpha: float = 1.0
    eta_lambda: float = 1e-4
    eta_sigma: float = 1e-4
    eta_iota: float = 1e-4
    alpha_min: float = 0.01
    alpha_max: float = 0.99
    lambda_bounds: tuple[float, float] = (1e-3, 1e3)
    sigma_bounds: tuple[float, float] = (1e-2, 10.0)
    iota_bounds: tuple[float, float] = (0.0, 10.0)
    paper_literal_sigma_grad: bool = False


@dataclass
class LastUpload:
    """Previous aggregated upload of one device (gradient bookkeeping)."""

    model: np.ndarray
    origin: int   # version the device trained from
    arrival: int  # global version when the upload was aggregated (pre-bump)


@dataclass
class ServerDeviceRecord:
    """Per-device control parameters and upload history held on the server."""

    lam: float = 1.0
    sigma: float = 1.0
    iota: float = 0.0
    eta_local: float = 0.05
    epochs: int = 5
    last_upload: LastUpload | None = None


@dataclass(frozen=True)
class AggregationOutcome:
    accepted: bool
    alpha: float
    staleness: int
    new_version: int


class GlobalModelStore:
    """Versioned global model with a ring of the last tau+2 snapshots."""

    def __init__(self, w0: np.ndarray, tau: int):
        if tau < 1:
            raise UsageError("staleness limit must be >= 1")
        self.tau = tau
        self.version = 0
        self._ring: dict[int, np.ndarray] = {0: w0.copy()}

    @property
    def current(self) -> np.ndarray:
        return self._ring[self.version]

    def snapshot(self, version: int) -> np.ndarray | None:
        return self._ring.get(version)

    def push(self, w_new: np.ndarray) -> int:
        self.version += 1
        self._ring[self.version] = w_new
        floor = self.version - self.tau - 1
        for v in [v for v in self._ring if v < floor]:
            del self._ring[v]
        return self.version


def admit_upload(t: int, o: int, tau: int) -> bool:
    """Staleness gate: keep the upload iff t - o + 1 <= tau."""
    if o > t:
        raise ProtocolError(f"upload origin {o} is newer than global version {t}")
    return (t - o + 1) <= tau


def compute_alpha(rec: ServerDeviceRecord, t: int, o: int, mu_alpha: float,
                  cfg: ServerConfig | None = None) -> tuple[float, float]:
    """Dynamic upload weight; returns (xi, clamped alpha).

    Both the version term and the staleness term are floored at 1 so the
    very first aggregation (version 0 store) stays well-defined.
    """
    cfg = cfg or ServerConfig(mu_alpha=mu_alpha)
    staleness = max(t - o + 1, 1)
    xi = rec.lam / (math.sqrt(max(t, 1)) * staleness ** rec.sigma) + rec.iota
    alpha = mu_alpha * xi / (1.0 + mu_alpha * xi)
    return xi, min(max(alpha, cfg.alpha_min), cfg.alpha_max)


def server_control_gradients(rec: ServerDeviceRecord, w_up: np.ndarray,
                             w_o: np.ndarray, w_prev_up: np.ndarray,
                             w_om1: np.ndarray, o: int, o_prime: int,
                             mu_alpha: float,
                             paper_literal_sigma_grad: bool = False):
    """Loss-surrogate gradients for (lambda, sigma, iota).

    ``o`` is the version the previous upload's aggregation produced and
    ``o_prime`` its origin; ``w_o``/``w_om1`` are the ring snapshots at those
    points. The surrogate composes the local-update gradient estimate
    (w_up - w_o)/(eta*epochs) with d(alpha)/d(control) through xi.
    ``paper_literal_sigma_grad`` swaps the sigma gradient's lam*ln(gap)
    factor for ln(sigma); the default is the form that matches the
    finite-difference oracle.
    """
    if o < 2:
        raise UsageError("control gradients need o >= 2")
    if rec.sigma <= 0:
        raise UsageError("sigma must be positive")
    gap = max(o - o_prime, 1)
    root = math.sqrt(o - 1)
    decay = root * gap ** rec.sigma
    xi = rec.lam / decay + rec.iota
    k = mu_alpha * dot(w_up - w_o, w_prev_up - w_om1) / (
        rec.eta_local * rec.epochs * (1.0 + mu_alpha * xi) ** 2
    )
    d_lambda = k / decay
    if paper_literal_sigma_grad:
        d_sigma = -k * math.log(rec.sigma) / decay
    else:
        d_sigma = -k * rec.lam * math.log(gap) / decay
    return d_lambda, d_sigma, k


def update_server_controls(rec: ServerDeviceRecord, gradients, etas,
                           cfg: ServerConfig) -> ServerDeviceRecord:
    """Gradient-descent step on the control parameters, then clamp."""
    d_lambda, d_sigma, d_iota = gradients
    eta_lambda, eta_sigma, eta_iota = etas
    if min(eta_lambda, eta_sigma, eta_iota) < 0:
        raise UsageError("control learning rates must be non-negative")

    def clamp(v, bounds):
        return min(max(v, bounds[0]), bounds[1])

    return replace(
        rec,
        lam=clamp(rec.lam - eta_lambda * d_lambda, cfg.lambda_bounds),
        sigma=clamp(rec.sigma - eta_sigma * d_sigma, cfg.sigma_bounds),
        iota=clamp(rec.iota - eta_iota * d_iota, cfg.iota_bounds),
    )


def aggregate_upload(store: GlobalModelStore, rec: ServerDeviceRecord,
                     w_up: np.ndarray, o: int, cfg: ServerConfig,
                     dynamic: bool = True):
    """Admit-checked aggregation of one upload.

    Runs the control update when the device's previous upload history is
    still inside the snapshot ring (first uploads and long-idle devices skip
    it), computes alpha, mixes, bumps the version and records the upload for
    the next round's gradients. Returns (outcome, updated record, trace row).
    """
    t = store.version
    staleness = t - o + 1
    prev = rec.last_upload
    if dynamic and prev is not None:
        prev_o = prev.arrival + 1  # version the previous aggregation produced
        w_o = store.snapshot(prev_o)
        w_om1 = store.snapshot(prev.arrival)
        if prev_o >= 2 and w_o is not None and w_om1 is not None:
            grads = server_control_gradients(
                rec, w_up, w_o, prev.model, w_om1, prev_o, prev.origin,
                cfg.mu_alpha, cfg.paper_literal_sigma_grad,
            )
            rec = update_server_controls(
                rec, grads, (cfg.eta_lambda, cfg.eta_sigma, cfg.eta_iota), cfg
            )
    xi, alpha = compute_alpha(rec, t, o, cfg.mu_alpha, cfg)
    new_version = store.push(mix(alpha, store.current, w_up))
    rec.last_upload = LastUpload(model=w_up.copy(), origin=o, arrival=t)
    outcome = AggregationOutcome(accepted=True, alpha=alpha,
                                 staleness=staleness, new_version=new_version)
    trace = {
        "t": new_version, "o": o, "staleness": staleness, "alpha": alpha,
        "xi": xi, "lambda": rec.lam, "sigma": rec.sigma, "iota": rec.iota,
    }
    return outcome, rec, trace


def fresh_model_response(store: GlobalModelStore, o_requester: int):
    """Current (model copy, version) when newer than the requester's base."""
    if store.version > o_requester:
        return store.current.copy(), store.version
    return None
