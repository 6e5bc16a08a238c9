"""Time-slot selection for the mid-round fresh-model request.

A device's first round samples the slot from a shared recurrent meta-policy
trained with REINFORCE; later rounds use a device-private Q-table over the
{add, stay, minus} action space. Slots always live in [1, L-1].

The meta-policy is a single gated recurrent cell (update gate + tanh
candidate) with a sigmoid head emitting a per-step "send now" probability.
The slot distribution is P(k) = p_k * prod_{l<k} (1 - p_l) for k < L-1, with
the forced last slot absorbing the leftover mass, so the recorded trajectory
is exactly the executed decision's log-probability terms. Backprop through
the unrolled cell is written by hand and checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

ACTIONS = ("add", "stay", "minus")
_ACTION_DELTA = (1, 0, -1)


@dataclass(frozen=True)
class SlotDecision:
    l_star: int
    n_steps: int                      # L of the round that made the decision
    trajectory: tuple = ()            # ((step, prob, bit), ...) meta path only
    action: int | None = None         # index into ACTIONS, Q path only


# ---------- REINFORCE meta-policy ----------

class MetaPolicy:
    """Gated recurrent cell + affine sigmoid head over slot steps."""

    def __init__(self, hidden: int, eta_rl: float, seed: int):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.eta_rl = eta_rl
        init = lambda *shape: 0.1 * rng.normal(size=shape)
        self.wz, self.uz, self.bz = init(hidden, 2), init(hidden, hidden), np.zeros(hidden)
        self.wc, self.uc, self.bc = init(hidden, 2), init(hidden, hidden), np.zeros(hidden)
        self.v = init(hidden)
        self.head_bias = -1.0

    # flat views are used by the finite-difference oracle
    def get_flat(self) -> np.ndarray:
        return np.concatenate([
            self.wz.ravel(), self.uz.ravel(), self.bz,
            self.wc.ravel(), self.uc.ravel(), self.bc,
            self.v, [self.head_bias],
        ])

    def set_flat(self, theta: np.ndarray) -> None:
        h = self.hidden
        sizes = [h * 2, h * h, h, h * 2, h * h, h, h, 1]
        if theta.shape != (sum(sizes),):
            raise UsageError("flat parameter size mismatch")
        parts, pos = [], 0
        for size in sizes:
            parts.append(theta[pos : pos + size])
            pos += size
        self.wz = parts[0].reshape(h, 2).copy()
        self.uz = parts[1].reshape(h, h).copy()
        self.bz = parts[2].copy()
        self.wc = parts[3].reshape(h, 2).copy()
        self.uc = parts[4].reshape(h, h).copy()
        self.bc = parts[5].copy()
        self.v = parts[6].copy()
        self.head_bias = float(parts[7][0])

    def _forward(self, n_unroll: int, total_steps: int):
        """Unroll over steps 1..n_unroll; prior bits are 0 on the executed path."""
        h_prev = np.zeros(self.hidden)
        cache = []
        probs = []
        for step in range(1, n_unroll + 1):
            x = np.array([0.0, step / total_steps])
            z = _sigmoid(self.wz @ x + self.uz @ h_prev + self.bz)
            c = np.tanh(self.wc @ x + self.uc @ h_prev + self.bc)
            h_cur = (1.0 - z) * h_prev + z * c
            p = _sigmoid(float(self.v @ h_cur) + self.head_bias)
            cache.append((x, h_prev, z, c, h_cur, p))
            probs.append(p)
            h_prev = h_cur
        return probs, cache

    def step_probs(self, total_steps: int) -> list[float]:
        """Per-step send probabilities p_1..p_{L-1}."""
        probs, _ = self._forward(total_steps - 1, total_steps)
        return probs

    def slot_distribution(self, total_steps: int) -> np.ndarray:
        """P(l_star = k) over slots 1..L-1 under the first-send rule."""
        p = self.step_probs(total_steps)
        out = np.empty(total_steps - 1)
        survive = 1.0
        for k in range(total_steps - 2):
            out[k] = survive * p[k]
            survive *= 1.0 - p[k]
        out[-1] = survive
        return out

    def log_prob_and_grad(self, trajectory, total_steps: int):
        """Sum of trajectory log-prob terms and its flat-theta gradient (BPTT)."""
        if not trajectory:
            return 0.0, np.zeros_like(self.get_flat())
        n_unroll = max(step for step, _, _ in trajectory)
        _, cache = self._forward(n_unroll, total_steps)
        bits = {step: bit for step, _, bit in trajectory}
        d = {name: np.zeros_like(getattr(self, name))
             for name in ("wz", "uz", "bz", "wc", "uc", "bc", "v")}
        d_head = 0.0
        logp = 0.0
        dh_next = np.zeros(self.hidden)
        for step in range(n_unroll, 0, -1):
            x, h_prev, z, c, h_cur, p = cache[step - 1]
            dh = dh_next.copy()
            if step in bits:
                bit = bits[step]
                logp += math.log(p) if bit else math.log1p(-p)
                dlogit = bit - p
                d["v"] += dlogit * h_cur
                d_head += dlogit
                dh += dlogit * self.v
            dz = dh * (c - h_prev)
            dc = dh * z
            daz = dz * z * (1.0 - z)
            dac = dc * (1.0 - c * c)
            d["wz"] += np.outer(daz, x)
            d["uz"] += np.outer(daz, h_prev)
            d["bz"] += daz
            d["wc"] += np.outer(dac, x)
            d["uc"] += np.outer(dac, h_prev)
            d["bc"] += dac
            dh_next = dh * (1.0 - z) + self.uz.T @ daz + self.uc.T @ dac
        grad = np.concatenate([
            d["wz"].ravel(), d["uz"].ravel(), d["bz"],
            d["wc"].ravel(), d["uc"].ravel(), d["bc"],
            d["v"], [d_head],
        ])
        return logp, grad


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _trajectory_for_slot(l_star: int, probs: list[float], total_steps: int) -> tuple:
    """Executed-decision trajectory: zeros then the terminating send bit.

    The forced slot L-1 carries no term of its own; its probability is the
    survival mass of steps 1..L-2.
    """
    if l_star < total_steps - 1:
        bits = [(step, probs[step - 1], 0) for step in range(1, l_star)]
        bits.append((l_star, probs[l_star - 1], 1))
    else:
        bits = [(step, probs[step - 1], 0) for step in range(1, total_steps - 1)]
    return tuple(bits)


def meta_select(policy: MetaPolicy, max_epochs: int, epsilon: float,
                rng: np.random.Generator) -> SlotDecision:
    """Sample a request slot from the meta-policy with epsilon exploration."""
    if max_epochs < 2:
        raise UsageError("need at least 2 local epochs to pick a slot")
    probs = policy.step_probs(max_epochs)
    if epsilon > 0 and rng.random() < epsilon:
        l_star = int(rng.integers(1, max_epochs))
    else:
        l_star = max_epochs - 1
        for step in range(1, max_epochs - 1):
            if rng.random() < probs[step - 1]:
                l_star = step
                break
    return SlotDecision(l_star=l_star, n_steps=max_epochs,
                        trajectory=_trajectory_for_slot(l_star, probs, max_epochs))


def meta_update(policy: MetaPolicy, decision: SlotDecision, reward: float,
                baseline: float) -> MetaPolicy:
    """REINFORCE ascent step: theta += eta * grad(log P) * (reward - baseline)."""
    advantage = reward - baseline
    if advantage == 0.0 or not decision.trajectory:
        return policy
    _, grad = policy.log_prob_and_grad(decision.trajectory, decision.n_steps)
    policy.set_flat(policy.get_flat() + policy.eta_rl * advantage * grad)
    return policy


# ---------- device-private Q-learning ----------

@dataclass
class QTable:
    """Action values over slots 1..L-1 for {add, stay, minus}."""

    n_slots: int
    phi_q: float = 0.5
    psi_q: float = 0.9
    values: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not 0.0 < self.phi_q <= 1.0:
            raise UsageError("phi_q must be in (0, 1]")
        if not 0.0 <= self.psi_q < 1.0:
            raise UsageError("psi_q must be in [0, 1)")
        if self.values is None:
            self.values = np.zeros((self.n_slots, len(ACTIONS)))

    def _check_slot(self, slot: int) -> None:
        if not 1 <= slot <= self.n_slots:
            raise UsageError(f"slot {slot} outside [1, {self.n_slots}]")


def q_select(table: QTable, l_prev: int, epsilon: float,
             rng: np.random.Generator) -> SlotDecision:
    """Epsilon-greedy action at the previous slot; result clamped to range."""
    table._check_slot(l_prev)
    if epsilon > 0 and rng.random() < epsilon:
        action = int(rng.integers(len(ACTIONS)))
    else:
        action = int(np.argmax(table.values[l_prev - 1]))
    l_star = min(max(l_prev + _ACTION_DELTA[action], 1), table.n_slots)
    return SlotDecision(l_star=l_star, n_steps=table.n_slots + 1, action=action)


def q_update(table: QTable, l_prev: int, a_prev: int, l_new: int, reward: float,
             phi_q: float, psi_q: float) -> QTable:
    """Temporal-difference update toward reward + discounted successor value."""
    table._check_slot(l_prev)
    table._check_slot(l_new)
    if not 0.0 < phi_q <= 1.0 or not 0.0 <= psi_q < 1.0:
        raise UsageError("phi_q in (0,1] and psi_q in [0,1) required")
    cell = table.values[l_prev - 1, a_prev]
    target = reward + psi_q * float(table.values[l_new - 1].max())
    table.values[l_prev - 1, a_prev] = cell + phi_q * (target - cell)
    return table


def epsilon_schedule(t_accepted: int, total_rounds: int, warmup_rounds: int = 5,
                     warm_eps: float = 0.5, start: float = 0.3,
                     end: float = 0.01) -> float:
    """Warm exploration for the first rounds, then linear decay over the run."""
    if t_accepted < warmup_rounds:
        return warm_eps
    frac = min(t_accepted / max(total_rounds, 1), 1.0)
    return start + (end - start) * frac
