"""Edge-server agent: picks a non-empty RAT subset for one ED per time step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import AdamState, DenseNet, ReplayBuffer, adam_step, clip_global_norm, hard_update

REWARD_FORMS = ("linear", "hinge")


def n_subset_actions(n_rats):
    return 2**n_rats - 1


def decode_action(index, n_rats):
    """Action index in ``1 .. 2**L - 1`` -> boolean RAT mask (bit l = RAT l+1)."""
    if not 1 <= index <= n_subset_actions(n_rats):
        raise ValueError(f"action {index} outside 1..{n_subset_actions(n_rats)}")
    return np.array([(index >> l) & 1 for l in range(n_rats)], dtype=bool)


def encode_action(mask):
    idx = sum(1 << l for l, on in enumerate(mask) if on)
    if idx == 0:
        raise ValueError("empty RAT subset")
    return idx


def es_state_dim(n_eds, n_rats):
    return 2 * n_eds * n_rats + n_eds + 3


def encode_es_state(prev, assign, r_min, ed_index, norm):
    """Flatten the ES observation for ED ``ed_index`` (1-based).

    Layout: ``x(t-1)`` (U*L, row-major by ED), ``R_lu(t-1)/r_max`` (U*L),
    ``R_min/r_max`` (U), then ``u/U``, ``R_min_u/r_max``, ``R_u(t-1)/r_max``.
    ``prev`` is the previous snapshot or ``None`` at cold start, in which
    case every history field is zero.
    """
    r_min = np.asarray(r_min, dtype=np.float64)
    n_eds = len(r_min)
    if not 1 <= ed_index <= n_eds:
        raise ValueError(f"ED index {ed_index} outside 1..{n_eds}")
    n_rats = np.asarray(assign).shape[1]
    if prev is None:
        x_prev = np.zeros((n_eds, n_rats))
        link_prev = np.zeros((n_eds, n_rats))
        ed_prev = np.zeros(n_eds)
    else:
        x_prev = np.asarray(prev.assign, dtype=np.float64)
        link_prev = prev.link_rates / norm.r_max
        ed_prev = prev.ed_rates / norm.r_max
    rmin_n = r_min / norm.r_max
    u = ed_index - 1
    return np.concatenate(
        (
            x_prev.ravel(),
            link_prev.ravel(),
            rmin_n,
            (ed_index / n_eds, rmin_n[u], ed_prev[u]),
        )
    )


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.005
    decay: float = 5e-4
    steps: int = 0

    def value(self, t=None):
        t = self.steps if t is None else t
        return self.end + (self.start - self.end) * math.exp(-self.decay * t)

    def advance(self):
        self.steps += 1


def constraint_term(slack_normalized, form):
    if form == "linear":
        return float(np.sum(slack_normalized))
    if form == "hinge":
        return float(np.sum(np.minimum(slack_normalized, 0.0)))
    raise ValueError(f"unknown reward form {form!r}")


def es_reward(snapshot, r_min, eta, zeta, norm, form="linear", rate_scale=None):
    """ES reward: weighted QoS-slack term plus weighted network utility.

    Rates in the slack term are divided by ``rate_scale`` (default r_max).
    ``form="hinge"`` keeps only the negative part of each ED's slack.
    """
    scale = norm.r_max if rate_scale is None else rate_scale
    slack = (snapshot.ed_rates - np.asarray(r_min)) / scale
    utility = float(np.sum(np.where(snapshot.assign, snapshot.utilities, 0.0)))
    return eta * constraint_term(slack, form) + zeta * utility


class DqnAgent:
    """Online/target Q-networks over the ``2**L - 1`` non-empty subsets."""

    def __init__(
        self,
        state_dim,
        n_rats,
        rng,
        hidden=(256, 128),
        lr=8e-4,
        gamma=0.99,
        buffer_size=1000,
        batch_size=64,
        epsilon=None,
        target_sync_every=100,
        grad_clip=1.0,
        adam_betas=(0.9, 0.999),
        adam_eps=1e-8,
    ):
        self.state_dim = state_dim
        self.n_rats = n_rats
        self.n_actions = n_subset_actions(n_rats)
        self.rng = rng
        self.gamma = gamma
        self.batch_size = batch_size
        self.target_sync_every = target_sync_every
        self.grad_clip = grad_clip
        self.online = DenseNet((state_dim, *hidden, self.n_actions), "linear", rng)
        self.target = self.online.copy()
        self.adam = AdamState.for_params(self.online.params(), lr, *adam_betas, adam_eps)
        self.buffer = ReplayBuffer(buffer_size, state_dim, 1, np.int64)
        self.epsilon = epsilon if epsilon is not None else EpsilonSchedule()
        self.learn_steps = 0

    def q_values(self, obs):
        return self.online(obs)

    def greedy_action(self, obs):
        # np.argmax keeps the first maximum: ties go to the lowest index
        return int(np.argmax(self.q_values(obs))) + 1

    def select_action(self, obs, rng=None, greedy=False):
        """Epsilon-greedy choice; the schedule advances on every non-greedy call."""
        rng = self.rng if rng is None else rng
        if greedy:
            return self.greedy_action(obs)
        eps = self.epsilon.value()
        self.epsilon.advance()
        if rng.random() >= eps:
            return self.greedy_action(obs)
        return int(rng.integers(1, self.n_actions + 1))

    def store(self, obs, action, reward, next_obs):
        self.buffer.push(obs, action, reward, next_obs)

    def learn(self, batch):
        """One Adam step on the mean squared TD error; returns the batch loss."""
        s, a, r, s2 = batch
        a = np.asarray(a, dtype=np.int64).reshape(-1) - 1
        n = len(a)
        q_next = self.target(s2)
        y = r + self.gamma * q_next.max(axis=1)
        q, cache = self.online.forward(s)
        rows = np.arange(n)
        td = q[rows, a] - y
        loss = float(np.mean(td * td))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite DQN loss {loss}")
        grad_out = np.zeros_like(q)
        grad_out[rows, a] = 2.0 * td / n
        grads, _ = self.online.backward(cache, grad_out)
        clip_global_norm(grads, self.grad_clip)
        adam_step(self.online.params(), grads, self.adam)
        self.learn_steps += 1
        if self.target_sync_every and self.learn_steps % self.target_sync_every == 0:
            hard_update(self.target, self.online)
        return loss

    def learn_from_buffer(self):
        batch = self.buffer.sample(self.batch_size, self.rng)
        if batch is None:
            return None
        return self.learn(batch)
