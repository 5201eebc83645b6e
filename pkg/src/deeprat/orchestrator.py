"""Two-stage training loop: ES subset selection, then per-RAT power control.

One episode visits every ED once in ascending order. For ED ``u`` the ES
agent picks a RAT subset, the RAT agents run ``K`` act/learn iterations on
the slot's channel, and the ES transition is scored on the final snapshot
of that slot. Constraint slacks inside the ES reward are the only feedback
path from the RATs back to the ES.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import pickle
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .channel import FadingNormals
from .ddpg import DdpgAgent, encode_rat_state, rat_reward, rat_state_dim
from .dqn import (
    DqnAgent,
    EpsilonSchedule,
    decode_action,
    encode_es_state,
    es_reward,
    es_state_dim,
    n_subset_actions,
)
from .env import HetNetEnv
from .nn import load_net, save_net

log = logging.getLogger(__name__)

# SeedSequence children, in spawn order (RAT agents come last)
_STREAMS = ("env", "dqn", "init", "probe", "eval")


class NumericAbort(FloatingPointError):
    """A loss or utility went non-finite; ``dump_path`` holds the diagnostics."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class EpisodeRecord:
    episode: int
    epsilon: float
    es_reward: float  # summed over the episode's U slots
    rat_rewards: np.ndarray  # (L,) summed over slots and inner iterations
    utility: float  # mean network utility over the slots
    sum_rate: float  # mean, bit/s
    ed_rates: np.ndarray  # (U,) mean, bit/s
    link_rates: np.ndarray  # (U, L) mean, bit/s
    c2_violations: int  # RAT-slots over budget
    c3_violations: int  # ED-slots under the QoS floor
    qos_slots_met: int  # slots in which every ED met its floor
    assign_share: np.ndarray  # (U, L) fraction of slots each link was assigned
    policy_utility: float  # greedy probe; equals ``utility`` in evaluation
    policy_sum_rate: float
    dqn_loss: float = 0.0  # mean over learn calls, 0 when none ran
    critic_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shock: bool = False
    scheme: str = "deeprat"

    def __post_init__(self):
        vals = [self.utility, self.sum_rate, self.policy_utility, self.es_reward]
        if not all(math.isfinite(v) for v in vals) or not np.all(np.isfinite(self.ed_rates)):
            raise NumericAbort(f"non-finite metrics in episode {self.episode}")


class _SlotAccumulator:
    def __init__(self, n_eds, n_rats):
        self.n = 0
        self.utility = 0.0
        self.sum_rate = 0.0
        self.ed_rates = np.zeros(n_eds)
        self.link_rates = np.zeros((n_eds, n_rats))
        self.c2 = 0
        self.c3 = 0
        self.qos_met = 0
        self.assign = np.zeros((n_eds, n_rats))

    def add(self, snap):
        self.n += 1
        self.utility += snap.network_utility
        self.sum_rate += snap.sum_rate
        self.ed_rates += snap.ed_rates
        self.link_rates += snap.link_rates
        self.c2 += snap.report.c2_violations
        self.c3 += snap.report.c3_violations
        self.qos_met += int(snap.report.c3_violations == 0)
        self.assign += snap.assign

    def record(self, episode, **extra):
        n = max(self.n, 1)
        util = self.utility / n
        rate = self.sum_rate / n
        extra.setdefault("policy_utility", util)
        extra.setdefault("policy_sum_rate", rate)
        extra.setdefault("epsilon", 0.0)
        extra.setdefault("es_reward", 0.0)
        extra.setdefault("rat_rewards", np.zeros(self.link_rates.shape[1]))
        return EpisodeRecord(
            episode=episode,
            utility=util,
            sum_rate=rate,
            ed_rates=self.ed_rates / n,
            link_rates=self.link_rates / n,
            c2_violations=self.c2,
            c3_violations=self.c3,
            qos_slots_met=self.qos_met,
            assign_share=self.assign / n,
            **extra,
        )


def build_env(config, rng):
    envs = config.environment
    env = HetNetEnv(
        config.rat_profiles(),
        config.qos_profiles(),
        rng,
        arena=config.arena,
        speed_range_kmh=(envs.ed_speed_min_kmh, envs.ed_speed_max_kmh),
        mobility_dt_s=envs.slot_duration_ms * 1e-3 * config.n_eds,
        rician_k_db=envs.rician_k_db,
        los_decay_m=envs.los_decay_distance_m,
        min_distance_m=envs.min_distance_m,
        reference_distance_m=envs.normalization_reference_distance_m,
        static=envs.channel_dynamics == "static",
    )
    if envs.ed_positions_m:
        env.place(envs.ed_positions_m)
    return env


def random_subsets(n_eds, n_rats, rng):
    """Uniform non-empty RAT subset per ED, as a boolean (U, L) matrix."""
    idx = rng.integers(1, n_subset_actions(n_rats) + 1, size=n_eds)
    return np.array([decode_action(int(a), n_rats) for a in idx])


class Trainer:
    """Owns the environment, the ES agent, the RAT agents and the loop state.

    Every stochastic component draws from its own child of
    ``SeedSequence(config.run.seed)``, so runs are reproducible and the
    per-RAT agents can step in threads without changing results.
    """

    def __init__(self, config, trace=False, dump_dir=None):
        self.config = config
        L, U = config.n_rats, config.n_eds
        children = np.random.SeedSequence(config.run.seed).spawn(len(_STREAMS) + L)
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}
        rat_rngs = [np.random.default_rng(s) for s in children[len(_STREAMS) :]]

        self.env = build_env(config, self.rngs["env"])
        d, p = config.dqn, config.ddpg
        self.dqn = DqnAgent(
            es_state_dim(U, L),
            L,
            self.rngs["dqn"],
            hidden=d.hidden_units,
            lr=d.learning_rate,
            gamma=d.discount,
            buffer_size=d.buffer_size,
            batch_size=d.batch_size,
            epsilon=EpsilonSchedule(d.epsilon_start, d.epsilon_end, d.epsilon_decay_per_step),
            target_sync_every=d.target_sync_every_learn_steps,
            grad_clip=d.grad_clip_norm,
            adam_betas=(d.adam_beta1, d.adam_beta2),
            adam_eps=d.adam_epsilon,
        )
        self.rats = [
            DdpgAgent(
                rat_state_dim(U),
                U,
                self.env.max_powers[l],
                rat_rngs[l],
                actor_hidden=p.actor_hidden_units,
                critic_hidden=p.critic_hidden_units,
                actor_lr=p.actor_learning_rate,
                critic_lr=p.critic_learning_rate,
                gamma=p.discount,
                tau=p.tau,
                buffer_size=p.buffer_size,
                batch_size=p.batch_size,
                ou_theta=p.ou_theta,
                ou_sigma=p.ou_sigma,
                grad_clip=p.grad_clip_norm,
                adam_betas=(p.adam_beta1, p.adam_beta2),
                adam_eps=p.adam_epsilon,
                preact_l2=p.actor_preactivation_l2,
                preact_bound=p.actor_preactivation_bound,
            )
            for l in range(L)
        ]
        self.assign = random_subsets(U, L, self.rngs["init"])
        self.prev = None
        self.episode = 0
        self.records = []
        self.probe_normals = FadingNormals.draw(self.rngs["probe"], (U, L))
        self.probe_assign = self.assign.copy()
        self.probe_prev = None
        self.trace = [] if trace else None
        self.dump_dir = dump_dir
        self._pool = None

    # -- helpers ---------------------------------------------------------------

    @property
    def n_eds(self):
        return self.config.n_eds

    @property
    def n_rats(self):
        return self.config.n_rats

    @property
    def norm(self):
        return self.env.norm

    @property
    def r_min(self):
        return self.env.r_min

    def _reward_kwargs(self):
        envs = self.config.environment
        return {
            "form": envs.reward_constraint_form,
            "rate_scale": 1.0 if envs.reward_rate_units == "raw" else None,
        }

    def _event(self, *ev):
        if self.trace is not None:
            self.trace.append(ev)

    def _map_rats(self, fn):
        """Apply ``fn(l)`` for every RAT, in threads when configured."""
        if self.config.run.parallel_rat_agents and self.n_rats > 1:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.n_rats)
            return list(self._pool.map(fn, range(self.n_rats)))
        return [fn(l) for l in range(self.n_rats)]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_pool"] = None
        return state

    def policy_powers(self, prev, assign, explore=False):
        """(U, L) power matrix from every RAT actor for a given assignment."""
        cols = [
            agent.act(encode_rat_state(prev, assign, self.r_min, l, self.norm), explore=explore)
            for l, agent in enumerate(self.rats)
        ]
        return np.column_stack(cols)

    def greedy_step(self, prev, assign, u):
        """Greedy ES choice for ED ``u`` (0-based); returns the new assignment."""
        obs = encode_es_state(prev, assign, self.r_min, u + 1, self.norm)
        assign = assign.copy()
        assign[u] = decode_action(self.dqn.greedy_action(obs), self.n_rats)
        return assign

    # -- training ----------------------------------------------------------------

    def _abort(self, exc, u):
        dump = None
        if self.dump_dir is not None:
            path = Path(self.dump_dir)
            path.mkdir(parents=True, exist_ok=True)
            dump = path / "numeric_abort.json"
            prev = self.prev
            state = {
                "episode": self.episode + 1,
                "ed_index": u + 1,
                "error": str(exc),
                "epsilon": self.dqn.epsilon.value(),
                "assign": self.assign.astype(int).tolist(),
                "ed_rates": None if prev is None else prev.ed_rates.tolist(),
                "powers": None if prev is None else prev.powers.tolist(),
                "dqn_checksum": self.dqn.online.checksum(),
                "actor_checksums": [a.actor.checksum() for a in self.rats],
            }
            dump.write_text(json.dumps(state, indent=2, default=repr))
        raise NumericAbort(f"episode {self.episode + 1}, ED {u + 1}: {exc}", dump) from exc

    def _ddpg_iteration(self, gains, acc_rewards, critic_losses):
        assign, prev = self.assign, self.prev
        obs = [encode_rat_state(prev, assign, self.r_min, l, self.norm) for l in range(self.n_rats)]

        def act(l):
            self._event("ddpg_act", l)
            return self.rats[l].act(obs[l], explore=True)

        powers = np.column_stack(self._map_rats(act))
        self._event("env_step")
        snap = self.env.step(assign, powers, gains)
        p = self.config.ddpg
        kw = self._reward_kwargs()

        def learn(l):
            agent = self.rats[l]
            r = p.reward_scale * rat_reward(
                snap, l, self.r_min, agent.max_power, self.norm, p.reward_eta1, p.reward_eta2,
                p.reward_zeta, **kw,
            )
            nxt = encode_rat_state(snap, assign, self.r_min, l, self.norm)
            agent.store(obs[l], powers[:, l], r, nxt)
            self._event("ddpg_learn", l)
            out = agent.learn_from_buffer()
            return r, (None if out is None else out[0])

        for l, (r, loss) in enumerate(self._map_rats(learn)):
            acc_rewards[l] += r
            if loss is not None:
                critic_losses[l].append(loss)
        self.prev = snap
        return snap

    def run_episode(self):
        """One DQN episode (U slots); returns its :class:`EpisodeRecord`."""
        cfg = self.config
        U, L = self.n_eds, self.n_rats
        e = self.episode + 1
        period = cfg.run.shock_period_episodes
        shock = bool(period) and e > 1 and (e - 1) % period == 0
        if shock:
            self.env.shock()
            self._event("shock", e)
        for agent in self.rats:
            agent.noise.reset()
        acc = _SlotAccumulator(U, L)
        rat_rewards = np.zeros(L)
        critic_losses = [[] for _ in range(L)]
        dqn_losses = []
        es_total = 0.0
        eps = self.dqn.epsilon.value()
        d = cfg.dqn
        u = 0
        try:
            for u in range(U):
                obs = encode_es_state(self.prev, self.assign, self.r_min, u + 1, self.norm)
                action = self.dqn.select_action(obs)
                self.assign = self.assign.copy()
                self.assign[u] = decode_action(action, L)
                self._event("es_select", u)
                gains = self.env.draw_gains()
                for _ in range(cfg.ddpg.k_inner):
                    snap = self._ddpg_iteration(gains, rat_rewards, critic_losses)
                r = d.reward_scale * es_reward(
                    snap, self.r_min, d.reward_eta, d.reward_zeta, self.norm, **self._reward_kwargs()
                )
                self._event("es_reward", u)
                nxt = encode_es_state(snap, self.assign, self.r_min, (u + 1) % U + 1, self.norm)
                self.dqn.store(obs, action, r, nxt)
                loss = self.dqn.learn_from_buffer()
                if loss is not None:
                    dqn_losses.append(loss)
                if not math.isfinite(snap.network_utility):
                    raise FloatingPointError("non-finite network utility")
                es_total += r
                acc.add(snap)
        except FloatingPointError as exc:
            self._abort(exc, u)
        self.env.advance_mobility()
        probe = self.greedy_probe()
        self.episode = e
        rec = acc.record(
            e,
            epsilon=eps,
            es_reward=es_total,
            rat_rewards=rat_rewards,
            policy_utility=probe.network_utility,
            policy_sum_rate=probe.sum_rate,
            dqn_loss=float(np.mean(dqn_losses)) if dqn_losses else 0.0,
            critic_losses=np.array([np.mean(c) if c else 0.0 for c in critic_losses]),
            shock=shock,
        )
        self.records.append(rec)
        return rec

    def greedy_probe(self):
        """Continue a noise-free greedy rollout on a frozen fading draw.

        The rollout keeps its own assignment and history across episodes, so
        once the policies settle it reaches a fixed point and its utility
        is a low-variance progress signal. Nothing is learned or stored.
        """
        gains = self.env.gains_for(self.probe_normals)
        assign, prev = self.probe_assign, self.probe_prev
        for u in range(self.n_eds):
            assign = self.greedy_step(prev, assign, u)
            prev = self.env.evaluate(assign, self.policy_powers(prev, assign), gains)
        self.probe_assign, self.probe_prev = assign, prev
        return prev

    def train(self, episodes=None, callback=None):
        """Run ``episodes`` more episodes (default: up to ``config.run.episodes``)."""
        if episodes is None:
            episodes = self.config.run.episodes - self.episode
        out = []
        for _ in range(episodes):
            rec = self.run_episode()
            out.append(rec)
            if callback is not None:
                callback(rec)
        return out

    # -- checkpoints -------------------------------------------------------------

    def save_checkpoint(self, directory):
        """Per-network binaries, an RNG-state file and the full loop state."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        save_net(self.dqn.online, path / "dqn_online.bin")
        save_net(self.dqn.target, path / "dqn_target.bin")
        for l, a in enumerate(self.rats):
            for name in ("actor", "critic", "actor_target", "critic_target"):
                save_net(getattr(a, name), path / f"rat{l + 1}_{name}.bin")
        rng_state = {name: r.bit_generator.state for name, r in self.rngs.items()}
        rng_state.update({f"rat{l + 1}": a.rng.bit_generator.state for l, a in enumerate(self.rats)})
        (path / "rng_state.json").write_text(json.dumps(rng_state, sort_keys=True))
        with open(path / "trainer_state.pkl", "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)

    @classmethod
    def load_checkpoint(cls, directory):
        path = Path(directory)
        with open(path / "trainer_state.pkl", "rb") as fh:
            trainer = pickle.load(fh)
        # the binaries and the RNG file are authoritative
        trainer.dqn.online = load_net(path / "dqn_online.bin")
        trainer.dqn.target = load_net(path / "dqn_target.bin")
        for l, a in enumerate(trainer.rats):
            for name in ("actor", "critic", "actor_target", "critic_target"):
                setattr(a, name, load_net(path / f"rat{l + 1}_{name}.bin"))
        rng_state = json.loads((path / "rng_state.json").read_text())
        for name, r in trainer.rngs.items():
            r.bit_generator.state = rng_state[name]
        for l, a in enumerate(trainer.rats):
            a.rng.bit_generator.state = rng_state[f"rat{l + 1}"]
        return trainer


def train(config, episodes=None, callback=None, **kwargs):
    """Build a :class:`Trainer` and run it; returns ``(trainer, records)``."""
    trainer = Trainer(config, **kwargs)
    try:
        records = trainer.train(episodes, callback)
    finally:
        trainer.close()
    return trainer, records


# -- evaluation ------------------------------------------------------------------


def evaluation_env(trainer, seed=None):
    """Copy of the trainer's environment with a fresh RNG.

    Every scheme evaluated with the same ``seed`` sees the same channel
    sequence, as long as it consumes one fading draw per slot.
    """
    env = copy.deepcopy(trainer.env)
    if seed is None:
        seed = np.random.SeedSequence(trainer.config.run.seed).spawn(len(_STREAMS))[-1]
    env.rng = np.random.default_rng(seed)
    return env


def run_policy(env, episodes, decide, scheme="deeprat", prev=None):
    """Roll out ``decide(u, prev, gains) -> (assign, powers)`` for ``episodes``.

    ``gains`` is the slot's true channel; schemes that should not see it
    simply ignore the argument. ``prev`` seeds the rate history. Per-slot
    snapshots are folded into one record per episode.
    """
    U, L = env.n_eds, env.n_rats
    records = []
    for e in range(1, episodes + 1):
        acc = _SlotAccumulator(U, L)
        for u in range(U):
            gains = env.draw_gains()
            assign, powers = decide(u, prev, gains)
            prev = env.step(assign, powers, gains)
            acc.add(prev)
        env.advance_mobility()
        records.append(acc.record(e, scheme=scheme))
    return records


def deeprat_policy(trainer):
    """Greedy ES plus noise-free actors, carrying the working assignment."""
    state = {"assign": trainer.assign.copy()}

    def decide(u, prev, gains):
        state["assign"] = trainer.greedy_step(prev, state["assign"], u)
        return state["assign"], trainer.policy_powers(prev, state["assign"])

    return decide


def evaluate(trainer, episodes=None, seed=None):
    """Greedy, noise-free rollouts on a copied environment; nothing learns."""
    if episodes is None:
        episodes = trainer.config.run.evaluation_episodes
    env = evaluation_env(trainer, seed)
    return run_policy(env, episodes, deeprat_policy(trainer), prev=trainer.prev)


# -- convergence -----------------------------------------------------------------


def detect_convergence(series, window=200, tol=None, tol_fraction=0.02):
    """First episode (1-based) ending a window whose spread is within tolerance.

    The spread is ``max - min`` over ``[e - window + 1, e]``; the tolerance
    is ``tol`` if given, else ``tol_fraction`` times the absolute window
    mean. Returns ``None`` when no window qualifies.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    x = np.asarray(series, dtype=np.float64)
    if len(x) < window:
        return None
    w = sliding_window_view(x, window)
    spread = w.max(axis=1) - w.min(axis=1)
    limit = tol if tol is not None else tol_fraction * np.abs(w.mean(axis=1))
    hits = np.flatnonzero(spread <= limit)
    if len(hits) == 0:
        return None
    return int(hits[0]) + window


def convergence_onset(end_episode, window):
    """First episode of the steady window that ends at ``end_episode``."""
    return None if end_episode is None else end_episode - window + 1


@dataclass
class SegmentConvergence:
    start: int  # first episode of the segment (1-based)
    end: int
    converged: int | None  # absolute episode ending the first steady window
    onset: int | None  # absolute first episode of that window

    @property
    def episodes_to_converge(self):
        return None if self.converged is None else self.converged - self.start + 1

    @property
    def episodes_to_onset(self):
        return None if self.onset is None else self.onset - self.start + 1


def segment_convergence(records, period, window, tol_fraction, key="policy_utility"):
    series = np.array([getattr(r, key) for r in records])
    period = period or len(series)
    out = []
    for start in range(0, len(series), period):
        seg = series[start : start + period]
        end = detect_convergence(seg, window, tol_fraction=tol_fraction)
        conv = None if end is None else start + end
        out.append(
            SegmentConvergence(
                start=start + 1,
                end=start + len(seg),
                converged=conv,
                onset=convergence_onset(conv, window),
            )
        )
    return out


@dataclass
class MobilityResult:
    records: list
    segments: list
    trainer: Trainer | None = None


def run_mobility_scenario(config, callback=None, **kwargs):
    """Train through periodic mobility shocks without resetting any learner."""
    period = config.run.shock_period_episodes
    if period and config.run.episodes % period:
        raise ValueError("shock period must divide the episode count")
    trainer, records = train(config, callback=callback, **kwargs)
    segs = segment_convergence(
        records,
        period,
        config.run.convergence_window_episodes,
        config.run.convergence_tolerance_fraction,
    )
    return MobilityResult(records, segs, trainer)
