"""Per-RAT power-allocation agents (actor-critic with OU exploration)."""

from __future__ import annotations

import math

import numpy as np

from .dqn import constraint_term
from .nn import (
    AdamState,
    DenseNet,
    ReplayBuffer,
    adam_step,
    clip_global_norm,
    soft_update,
)


def rat_state_dim(n_eds):
    return 4 * n_eds


def encode_rat_state(prev, assign, r_min, rat_index, norm):
    """Observation of RAT ``rat_index`` (0-based), length ``4U``.

    Blocks: current assignment indicator ``U_l(t)``, ``R_min/r_max``,
    ``R_lu(t-1)/r_max`` and ``R_u(t-1)/r_max``. The two history blocks are
    zeroed for EDs not currently assigned to this RAT, and entirely zero
    when ``prev`` is ``None``.
    """
    assign = np.asarray(assign, dtype=bool)
    ind = assign[:, rat_index].astype(np.float64)
    rmin_n = np.asarray(r_min, dtype=np.float64) / norm.r_max
    if prev is None:
        link_prev = np.zeros_like(ind)
        ed_prev = np.zeros_like(ind)
    else:
        link_prev = prev.link_rates[:, rat_index] / norm.r_max * ind
        ed_prev = prev.ed_rates / norm.r_max * ind
    return np.concatenate((ind, rmin_n, link_prev, ed_prev))


def rat_reward(
    snapshot, rat_index, r_min, max_power, norm, eta1, eta2, zeta, form="linear", rate_scale=None
):
    """Reward of one RAT agent: power slack, QoS slack of its EDs, utility.

    The power slack is expressed as a fraction of ``max_power`` and rates are
    divided by ``rate_scale`` (default r_max). With ``form="hinge"`` only the
    negative part of each slack is kept.
    """
    scale = norm.r_max if rate_scale is None else rate_scale
    mine = snapshot.assign[:, rat_index]
    power_slack = (max_power - float(np.sum(snapshot.powers[mine, rat_index]))) / max_power
    qos_slack = (snapshot.ed_rates[mine] - np.asarray(r_min)[mine]) / scale
    utility = float(np.sum(snapshot.utilities[mine, rat_index]))
    return (
        eta1 * constraint_term(np.array([power_slack]), form)
        + eta2 * constraint_term(qos_slack, form)
        + zeta * utility
    )


class OuNoise:
    """Discrete Ornstein-Uhlenbeck process ``x += theta (mu - x) + sigma N(0, 1)``."""

    def __init__(self, size, rng, theta=0.15, sigma=0.03, mu=0.0):
        self.size = size
        self.rng = rng
        self.theta = theta
        self.sigma = sigma
        self.mu = mu
        self.state = np.full(size, mu, dtype=np.float64)

    def reset(self):
        self.state[:] = self.mu

    def step(self):
        self.state = (
            self.state
            + self.theta * (self.mu - self.state)
            + self.sigma * self.rng.standard_normal(self.size)
        )
        return self.state.copy()


class DdpgAgent:
    """Actor ``state -> U`` logistic powers, critic ``(state, action) -> Q``.

    Actions are handled internally as fractions of ``max_power``. The first
    ``action_dim`` state entries are the assignment indicator and act as a
    mask: unassigned outputs are forced to zero both when acting and when
    they are fed to the critic.
    """

    def __init__(
        self,
        state_dim,
        action_dim,
        max_power,
        rng,
        actor_hidden=(16, 16),
        critic_hidden=(16, 16),
        actor_lr=5e-4,
        critic_lr=5e-4,
        gamma=0.99,
        tau=0.005,
        buffer_size=500,
        batch_size=16,
        ou_theta=0.15,
        ou_sigma=0.03,
        grad_clip=1.0,
        adam_betas=(0.9, 0.999),
        adam_eps=1e-8,
        preact_l2=0.0,
        preact_bound=0.0,
    ):
        self.state_dim = state_dim
        self.preact_l2 = preact_l2
        self.preact_bound = preact_bound
        self.action_dim = action_dim
        self.max_power = float(max_power)
        self.rng = rng
        self.gamma = gamma
        self.tau = tau
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.actor = DenseNet((state_dim, *actor_hidden, action_dim), "logistic", rng)
        self.critic = DenseNet((state_dim + action_dim, *critic_hidden, 1), "linear", rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_adam = AdamState.for_params(self.actor.params(), actor_lr, *adam_betas, adam_eps)
        self.critic_adam = AdamState.for_params(
            self.critic.params(), critic_lr, *adam_betas, adam_eps
        )
        self.buffer = ReplayBuffer(buffer_size, state_dim, action_dim)
        self.noise = OuNoise(action_dim, rng, ou_theta, ou_sigma)

    def mask(self, obs):
        return np.asarray(obs)[..., : self.action_dim]

    def policy(self, obs, target=False):
        net = self.actor_target if target else self.actor
        return net(obs) * self.mask(obs)

    def act(self, obs, explore=True):
        """Powers in Watt: actor output plus OU noise, clipped, masked."""
        a = self.actor(obs)
        if explore:
            a = a + self.noise.step()
        a = np.clip(a, 0.0, 1.0) * self.mask(obs)
        return a * self.max_power

    def store(self, obs, action_w, reward, next_obs):
        self.buffer.push(obs, np.asarray(action_w) / self.max_power, reward, next_obs)

    def _critic_in(self, s, a):
        return np.concatenate((s, a), axis=-1)

    def critic_learn(self, batch):
        s, a, r, s2 = batch
        a2 = self.policy(s2, target=True)
        y = r + self.gamma * self.critic_target(self._critic_in(s2, a2))[:, 0]
        q, cache = self.critic.forward(self._critic_in(s, a))
        td = q[:, 0] - y
        loss = float(np.mean(td * td))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite critic loss {loss}")
        grads, _ = self.critic.backward(cache, (2.0 * td / len(td))[:, None])
        clip_global_norm(grads, self.grad_clip)
        adam_step(self.critic.params(), grads, self.critic_adam)
        return loss

    def actor_gradient(self, states, preact_l2=0.0, preact_bound=0.0):
        """Mean critic value of the current policy and its gradient w.r.t. the actor.

        The critic's input gradient on the action block is chained through
        the mask into the actor's backward pass. With ``preact_l2 > 0`` the
        objective also subtracts ``preact_l2 * mean(sum(e**2))`` where
        ``e = max(|z| - preact_bound, 0)`` is the excess of each output
        pre-activation over the bound. This keeps the logistic out of its
        flat tails, where the actor could no longer recover.
        """
        raw, a_cache = self.actor.forward(states)
        m = self.mask(states)
        q, c_cache = self.critic.forward(self._critic_in(states, raw * m))
        n = len(states)
        objective = float(np.mean(q))
        _, g_in = self.critic.backward(c_cache, np.full_like(q, 1.0 / n))
        g_action = g_in[:, self.state_dim :] * m
        extra = None
        if preact_l2:
            z = a_cache.pre[-1]
            excess = np.maximum(np.abs(z) - preact_bound, 0.0)
            objective -= preact_l2 * float(np.mean(np.sum(excess * excess, axis=1)))
            extra = -2.0 * preact_l2 * np.sign(z) * excess / n
        grads, _ = self.actor.backward(a_cache, g_action, extra)
        return objective, grads

    def actor_learn(self, batch):
        """Adam ascent on the mean critic value; returns the pre-step estimate."""
        objective, grads = self.actor_gradient(batch[0], self.preact_l2, self.preact_bound)
        grads = [-g for g in grads]
        clip_global_norm(grads, self.grad_clip)
        adam_step(self.actor.params(), grads, self.actor_adam)
        return objective

    def update_targets(self):
        soft_update(self.critic_target, self.critic, self.tau)
        soft_update(self.actor_target, self.actor, self.tau)

    def learn(self, batch):
        critic_loss = self.critic_learn(batch)
        objective = self.actor_learn(batch)
        self.update_targets()
        return critic_loss, objective

    def learn_from_buffer(self):
        batch = self.buffer.sample(self.batch_size, self.rng)
        if batch is None:
            return None
        return self.learn(batch)
