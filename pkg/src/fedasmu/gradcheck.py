"""Central-finite-difference oracles for every analytic gradient.

Four families: task-model gradients, server control-parameter gradients,
device control-parameter gradients, and the meta-policy log-probability
gradient. Each check builds the loss chain independently of the analytic
code path and differentiates it numerically; `run_all` reports the maximum
relative error per family.
"""

from __future__ import annotations

import math

import numpy as np

from .device import DeviceControlState, device_control_gradients
from .selector import MetaPolicy, _trajectory_for_slot
from .server import ServerDeviceRecord, server_control_gradients
from .tasks import ModelSpec, generate_synthetic, loss_and_grad

TASK_TOLERANCE = 1e-6
CONTROL_TOLERANCE = 1e-4


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _central_diff(fn, x0: float, step: float) -> float:
    return (fn(x0 + step) - fn(x0 - step)) / (2.0 * step)


# ---------- (a) task-model gradients ----------

def check_task_gradients(instances: int = 20, seed: int = 0,
                         coords_per_instance: int = 20,
                         step: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        kind = "linear-softmax" if i % 2 == 0 else "mlp-1hidden"
        s = int(rng.integers(3, 9))
        c = int(rng.integers(2, 6))
        spec = ModelSpec(kind=kind, input_dim=s, n_classes=c,
                         hidden=int(rng.integers(3, 8)))
        batch = generate_synthetic(int(rng.integers(c, 4 * c)), s, c, 1.0,
                                   np.random.SeedSequence([seed, 7, i]))
        w = rng.normal(scale=0.5, size=spec.dim)
        _, grad = loss_and_grad(spec, w, batch)
        for j in rng.choice(spec.dim, size=min(coords_per_instance, spec.dim),
                            replace=False):
            def loss_at(v, j=int(j)):
                w2 = w.copy()
                w2[j] = v
                return loss_and_grad(spec, w2, batch)[0]
            worst = max(worst, _rel_err(grad[j], _central_diff(loss_at, w[j], step)))
    return worst


# ---------- (b) server control gradients ----------

def _alpha_chain(lam, sigma, iota, o, o_prime, mu_alpha):
    xi = lam / (math.sqrt(o - 1) * (o - o_prime) ** sigma) + iota
    return mu_alpha * xi / (1.0 + mu_alpha * xi)


def check_server_control_gradients(instances: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        dim = int(rng.integers(4, 16))
        rec = ServerDeviceRecord(
            lam=float(rng.uniform(0.3, 3.0)), sigma=float(rng.uniform(0.3, 2.0)),
            iota=float(rng.uniform(0.0, 0.5)), eta_local=float(rng.uniform(0.01, 0.1)),
            epochs=int(rng.integers(1, 10)))
        o = int(rng.integers(3, 30))
        o_prime = int(rng.integers(1, o))
        mu_alpha = float(rng.uniform(0.5, 2.0))
        w_up, w_o, w_prev, w_om1 = (rng.normal(size=dim) for _ in range(4))
        analytic = server_control_gradients(rec, w_up, w_o, w_prev, w_om1,
                                            o, o_prime, mu_alpha)
        g_i = (w_up - w_o) / (rec.eta_local * rec.epochs)
        pull = float(np.dot(g_i, w_prev - w_om1))

        def surrogate(lam=rec.lam, sigma=rec.sigma, iota=rec.iota):
            # d/d(control) of dot(g_i, w_om1 + alpha*(w_prev - w_om1))
            return _alpha_chain(lam, sigma, iota, o, o_prime, mu_alpha) * pull

        numeric = (
            _central_diff(lambda v: surrogate(lam=v), rec.lam, 1e-6),
            _central_diff(lambda v: surrogate(sigma=v), rec.sigma, 1e-6),
            _central_diff(lambda v: surrogate(iota=v), rec.iota, 1e-6),
        )
        for a, n in zip(analytic, numeric):
            worst = max(worst, _rel_err(a, n))
    return worst


# ---------- (c) device control gradients ----------

def _beta_chain(gamma, upsilon, g, o, mu_beta):
    phi = gamma / math.sqrt(g) * (1.0 - upsilon / math.sqrt(g - o + 1))
    return mu_beta * phi / (1.0 + mu_beta * phi)


def check_device_control_gradients(instances: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        dim = int(rng.integers(4, 16))
        dcs = DeviceControlState(gamma=float(rng.uniform(0.3, 3.0)),
                                 upsilon=float(rng.uniform(0.0, 0.8)))
        g_version = int(rng.integers(2, 50))
        o = int(rng.integers(1, g_version + 1))
        mu_beta = float(rng.uniform(0.5, 2.0))
        grad_local, w_g, w_a = (rng.normal(size=dim) for _ in range(3))
        analytic = device_control_gradients(dcs, grad_local, w_g, w_a,
                                            g_version, o, mu_beta)
        pull = float(np.dot(grad_local, w_g - w_a))

        def surrogate(gamma=dcs.gamma, upsilon=dcs.upsilon):
            # d/d(control) of dot(grad_local, w_a + beta*(w_g - w_a))
            return _beta_chain(gamma, upsilon, g_version, o, mu_beta) * pull

        numeric = (
            _central_diff(lambda v: surrogate(gamma=v), dcs.gamma, 1e-6),
            _central_diff(lambda v: surrogate(upsilon=v), dcs.upsilon, 1e-6),
        )
        for a, n in zip(analytic, numeric):
            worst = max(worst, _rel_err(a, n))
    return worst


# ---------- (d) meta-policy log-probability gradient ----------

def check_meta_logprob_gradient(instances: int = 20, seed: int = 0,
                                coords_per_instance: int = 20) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        policy = MetaPolicy(hidden=8, eta_rl=1e-3,
                            seed=np.random.SeedSequence([seed, 11, i]))
        # wider weights than the training init: keeps the probed gradient
        # components away from the float-cancellation floor
        policy.set_flat(rng.normal(scale=0.6, size=policy.get_flat().size))
        total_steps = int(rng.integers(3, 10))
        l_star = int(rng.integers(1, total_steps))
        probs = policy.step_probs(total_steps)
        traj = _trajectory_for_slot(l_star, probs, total_steps)
        if not traj:
            continue
        _, grad = policy.log_prob_and_grad(traj, total_steps)
        theta = policy.get_flat()
        for j in rng.choice(theta.size, size=coords_per_instance, replace=False):
            def logp_at(v, j=int(j)):
                t2 = theta.copy()
                t2[j] = v
                policy.set_flat(t2)
                lp, _ = policy.log_prob_and_grad(traj, total_steps)
                return lp
            # wider step: tiny recurrent-weight gradients drown in float
            # cancellation at 1e-6
            numeric = _central_diff(logp_at, theta[j], 1e-4)
            policy.set_flat(theta)
            worst = max(worst, _rel_err(grad[j], numeric))
    return worst


def run_all(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Max relative error of every family, keyed by check name."""
    return {
        "task_gradients": check_task_gradients(instances, seed),
        "server_control_gradients": check_server_control_gradients(instances, seed),
        "device_control_gradients": check_device_control_gradients(instances, seed),
        "meta_logprob_gradient": check_meta_logprob_gradient(instances, seed),
    }


TOLERANCES = {
    "task_gradients": TASK_TOLERANCE,
    "server_control_gradients": CONTROL_TOLERANCE,
    "device_control_gradients": CONTROL_TOLERANCE,
    "meta_logprob_gradient": CONTROL_TOLERANCE,
}
