"""Edge-server agent: observation layout, action coding, exploration, reward, learning."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeprat.dqn import (
    DqnAgent,
    EpsilonSchedule,
    decode_action,
    encode_action,
    encode_es_state,
    es_reward,
    es_state_dim,
    n_subset_actions,
)
from deeprat.env import NormalizationSpec

from conftest import CHI2_999, chi_square

NORM = NormalizationSpec(r_max=1e8, c_max=900.0)


def fake_snapshot(rng, n_eds=10, n_rats=3):
    assign = rng.random((n_eds, n_rats)) < 0.5
    assign[:, 0] |= ~assign.any(axis=1)
    link = np.where(assign, rng.uniform(0, 5e7, (n_eds, n_rats)), 0.0)
    util = np.where(assign, rng.normal(0, 0.01, (n_eds, n_rats)), 0.0)
    return SimpleNamespace(assign=assign, link_rates=link, ed_rates=link.sum(axis=1), utilities=util)


def agent_with_output_bias(bias, state_dim=4, n_rats=2, **kw):
    agent = DqnAgent(state_dim, n_rats, np.random.default_rng(0), hidden=(8,), **kw)
    agent.online.weights[-1][...] = 0.0
    agent.online.biases[-1][...] = bias
    return agent


class TestEncoding:
    def test_paper_length(self):
        rng = np.random.default_rng(0)
        obs = encode_es_state(fake_snapshot(rng), np.ones((10, 3), bool), rng.uniform(1e4, 9e4, 10), 1, NORM)
        assert es_state_dim(10, 3) == 73
        assert obs.shape == (73,)

    def test_cold_start_history_is_zero(self):
        r_min = np.linspace(1e4, 1e5, 10)
        obs = encode_es_state(None, np.ones((10, 3), bool), r_min, 4, NORM)
        np.testing.assert_array_equal(obs[:60], 0.0)
        np.testing.assert_allclose(obs[60:70], r_min / NORM.r_max, rtol=1e-15)
        np.testing.assert_allclose(obs[70:], [0.4, r_min[3] / NORM.r_max, 0.0], rtol=1e-15)

    def test_ed_index_range(self):
        with pytest.raises(ValueError):
            encode_es_state(None, np.ones((2, 2), bool), [1.0, 1.0], 0, NORM)
        with pytest.raises(ValueError):
            encode_es_state(None, np.ones((2, 2), bool), [1.0, 1.0], 3, NORM)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_permutation_audit(self, seed):
        rng = np.random.default_rng(seed)
        snap = fake_snapshot(rng)
        r_min = rng.uniform(1e4, 9e4, 10)
        u = int(rng.integers(1, 11))
        i, j = rng.choice([k for k in range(10) if k != u - 1], 2, replace=False)
        perm = np.arange(10)
        perm[[i, j]] = perm[[j, i]]
        swapped = SimpleNamespace(
            assign=snap.assign[perm], link_rates=snap.link_rates[perm], ed_rates=snap.ed_rates[perm]
        )
        a = encode_es_state(snap, snap.assign, r_min, u, NORM)
        b = encode_es_state(swapped, snap.assign, r_min[perm], u, NORM)
        blocks = lambda v: (v[:30].reshape(10, 3), v[30:60].reshape(10, 3), v[60:70])
        for xa, xb in zip(blocks(a), blocks(b)):
            np.testing.assert_array_equal(xa[perm], xb)
        np.testing.assert_array_equal(a[70:], b[70:])


class TestActions:
    @pytest.mark.parametrize("n_rats", [1, 2, 3, 4])
    def test_decode_is_a_bijection(self, n_rats):
        masks = {tuple(decode_action(i, n_rats)) for i in range(1, n_subset_actions(n_rats) + 1)}
        assert len(masks) == 2**n_rats - 1
        assert (False,) * n_rats not in masks
        for i in range(1, n_subset_actions(n_rats) + 1):
            assert encode_action(decode_action(i, n_rats)) == i

    def test_bit_order(self):
        np.testing.assert_array_equal(decode_action(1, 3), [True, False, False])
        np.testing.assert_array_equal(decode_action(6, 3), [False, True, True])

    @pytest.mark.parametrize("bad", [0, 8, -1])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            decode_action(bad, 3)

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            encode_action([False, False, False])

    def test_full_exploration_is_uniform(self):
        agent = DqnAgent(73, 3, np.random.default_rng(1), hidden=(8,), epsilon=EpsilonSchedule(1.0, 1.0))
        obs = np.zeros(73)
        draws = [agent.select_action(obs) for _ in range(10_000)]
        counts = np.bincount(draws, minlength=8)
        assert counts[0] == 0
        assert chi_square(counts[1:]) < CHI2_999[6]

    def test_greedy_unique_max(self):
        agent = agent_with_output_bias([0.1, 0.9, -0.3], epsilon=EpsilonSchedule(0.0, 0.0))
        assert {agent.select_action(np.ones(4)) for _ in range(50)} == {2}

    def test_tie_goes_to_lowest_index(self):
        agent = agent_with_output_bias([0.2, 0.7, 0.7])
        assert agent.select_action(np.ones(4), greedy=True) == 2

    def test_greedy_flag_does_not_advance_schedule(self):
        agent = agent_with_output_bias([0.0, 1.0, 0.0])
        agent.select_action(np.ones(4), greedy=True)
        assert agent.epsilon.steps == 0
        agent.select_action(np.ones(4))
        assert agent.epsilon.steps == 1

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3), shift=st.floats(-1e3, 1e3))
    def test_argmax_invariant_under_affine_output(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        agent = DqnAgent(6, 3, rng, hidden=(8,))
        obs = rng.normal(size=6)
        q = agent.q_values(obs)
        # skip near-ties that rounding could flip
        top = np.sort(q)[-2:]
        if top[1] - top[0] < 1e-9 * max(1.0, abs(top[1])):
            return
        before = agent.greedy_action(obs)
        agent.online.weights[-1] *= scale
        agent.online.biases[-1][...] = scale * agent.online.biases[-1] + shift
        assert agent.greedy_action(obs) == before


class TestEpsilonSchedule:
    def test_endpoints(self):
        s = EpsilonSchedule()
        assert s.value(0) == 1.0
        assert s.value(10**7) == pytest.approx(0.005, abs=1e-12)

    @given(t=st.integers(0, 10**6))
    def test_closed_form(self, t):
        s = EpsilonSchedule()
        assert s.value(t) == pytest.approx(0.005 + 0.995 * np.exp(-5e-4 * t), rel=1e-14)

    @given(t=st.integers(0, 10**6), dt=st.integers(1, 1000))
    def test_monotone_and_bounded(self, t, dt):
        s = EpsilonSchedule()
        assert 0.005 <= s.value(t + dt) <= s.value(t) <= 1.0


class TestEsReward:
    def _snap(self, ed_rates, utilities, assign):
        return SimpleNamespace(ed_rates=np.asarray(ed_rates, float), utilities=np.asarray(utilities, float),
                               assign=np.asarray(assign, bool))

    def test_exact_qos_gives_utility_term(self):
        snap = self._snap([5.0, 7.0], [[0.25, 0.5], [-0.125, 0.0]], [[1, 1], [1, 0]])
        norm = NormalizationSpec(r_max=10.0, c_max=1.0)
        assert es_reward(snap, [5.0, 7.0], 1e3, 8e-4, norm) == pytest.approx(8e-4 * 0.625, rel=1e-15)

    def test_one_ed_short(self):
        norm = NormalizationSpec(r_max=1.0, c_max=1.0)
        snap = self._snap([0.99, 2.0], np.zeros((2, 1)), [[1], [1]])
        assert es_reward(snap, [1.0, 2.0], 1e3, 8e-4, norm) == pytest.approx(-10.0, rel=1e-12)

    def test_hinge_ignores_surplus(self):
        norm = NormalizationSpec(r_max=1.0, c_max=1.0)
        snap = self._snap([3.0, 1.5], np.zeros((2, 1)), [[1], [1]])
        assert es_reward(snap, [1.0, 2.0], 1e3, 0.0, norm, form="hinge") == pytest.approx(-500.0)
        assert es_reward(snap, [1.0, 2.0], 1e3, 0.0, norm) == pytest.approx(1500.0)

    def test_unknown_form(self):
        norm = NormalizationSpec(r_max=1.0, c_max=1.0)
        with pytest.raises(ValueError):
            es_reward(self._snap([1.0], [[0.0]], [[1]]), [1.0], 1.0, 1.0, norm, form="cubic")

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_scalar_recomputation(self, seed):
        rng = np.random.default_rng(seed)
        snap = fake_snapshot(rng)
        r_min = rng.uniform(1e4, 5e7, 10)
        total = 0.0
        for u in range(10):
            total += 1e3 * (snap.ed_rates[u] - r_min[u]) / NORM.r_max
            for l in range(3):
                if snap.assign[u, l]:
                    total += 8e-4 * snap.utilities[u, l]
        got = es_reward(snap, r_min, 1e3, 8e-4, NORM)
        assert abs(got - total) <= 1e-12 * max(1.0, abs(total))


# Two-state chain: s0 -> s1 -> s0 whatever the action, three actions,
# rewards R[s, a], discount 0.5. By hand: V0 = (1 + 2g) / (1 - g^2) = 8/3,
# V1 = 2 + g V0 = 10/3, and Q(s, a) = R[s, a] + g V(s').
CHAIN_R = np.array([[1.0, 0.0, 0.5], [0.0, 2.0, 1.0]])
CHAIN_GAMMA = 0.5
CHAIN_Q = np.array([[8 / 3, 5 / 3, 13 / 6], [4 / 3, 10 / 3, 7 / 3]])


def chain_batch():
    eye = np.eye(2)
    s, a, r, s2 = [], [], [], []
    for state in range(2):
        for act in range(3):
            s.append(eye[state])
            a.append([act + 1])
            r.append(CHAIN_R[state, act])
            s2.append(eye[1 - state])
    return np.array(s), np.array(a), np.array(r), np.array(s2)


class TestLearning:
    def test_chain_oracle_is_a_bellman_fixed_point(self):
        v = CHAIN_Q.max(axis=1)
        np.testing.assert_allclose(CHAIN_Q, CHAIN_R + CHAIN_GAMMA * v[::-1, None], rtol=1e-15)

    def test_two_state_chain_reaches_fixed_point(self):
        agent = DqnAgent(2, 2, np.random.default_rng(3), hidden=(32,), lr=1e-2, gamma=CHAIN_GAMMA,
                         target_sync_every=10, grad_clip=100.0)
        batch = chain_batch()
        for _ in range(500):
            agent.learn(batch)
        np.testing.assert_allclose(agent.q_values(np.eye(2)), CHAIN_Q, atol=1e-2)

    def test_zero_discount_fixed_point(self):
        agent = agent_with_output_bias([0.5, -1.0, 2.0], gamma=0.0)
        s = np.ones((3, 4))
        batch = (s, np.array([[1], [2], [3]]), np.array([0.5, -1.0, 2.0]), s)
        before = agent.online.checksum()
        assert agent.learn(batch) == 0.0
        assert agent.online.checksum() == before

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_loss_finite_and_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        agent = DqnAgent(5, 3, rng, hidden=(8,))
        batch = (rng.normal(size=(6, 5)), rng.integers(1, 8, (6, 1)), rng.normal(size=6), rng.normal(size=(6, 5)))
        loss = agent.learn(batch)
        assert np.isfinite(loss) and loss >= 0

    def test_insufficient_buffer_is_a_no_op(self):
        agent = DqnAgent(5, 3, np.random.default_rng(0), hidden=(8,), batch_size=4)
        for _ in range(3):
            agent.store(np.zeros(5), 1, 0.0, np.zeros(5))
        before = agent.online.checksum()
        assert agent.learn_from_buffer() is None
        assert agent.online.checksum() == before

    def test_target_sync_cadence(self):
        agent = DqnAgent(2, 2, np.random.default_rng(0), hidden=(8,), target_sync_every=3)
        batch = chain_batch()
        start = agent.target.checksum()
        agent.learn(batch)
        agent.learn(batch)
        assert agent.target.checksum() == start
        agent.learn(batch)
        assert agent.target.checksum() == agent.online.checksum()

    def test_replay_round_trip(self):
        agent = DqnAgent(73, 3, np.random.default_rng(0), hidden=(8,), batch_size=1, buffer_size=1)
        rng = np.random.default_rng(1)
        s, s2 = rng.normal(size=73), rng.normal(size=73)
        agent.store(s, 5, -3.25, s2)
        bs, ba, br, bs2 = agent.buffer.sample(1, rng)
        np.testing.assert_array_equal(bs[0], s)
        np.testing.assert_array_equal(bs2[0], s2)
        assert ba[0, 0] == 5 and br[0] == -3.25
        np.testing.assert_array_equal(decode_action(int(ba[0, 0]), 3), [True, False, True])
