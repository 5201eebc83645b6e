"""Training loop structure, determinism, checkpoints, evaluation and convergence detection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeprat.config import ConfigError
from deeprat.orchestrator import (
    EpisodeRecord,
    NumericAbort,
    Trainer,
    convergence_onset,
    detect_convergence,
    evaluate,
    run_mobility_scenario,
    segment_convergence,
    train,
)


def records_equal(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        for name in EpisodeRecord.__dataclass_fields__:
            vx, vy = getattr(x, name), getattr(y, name)
            if isinstance(vx, np.ndarray):
                np.testing.assert_array_equal(vx, vy, err_msg=name)
            else:
                assert vx == vy, name


def fingerprint(trainer):
    nets = [trainer.dqn.online, trainer.dqn.target]
    for a in trainer.rats:
        nets += [a.actor, a.critic, a.actor_target, a.critic_target]
    return (
        tuple(n.checksum() for n in nets),
        len(trainer.dqn.buffer),
        tuple(len(a.buffer) for a in trainer.rats),
        trainer.dqn.epsilon.steps,
        tuple(str(r.bit_generator.state) for r in trainer.rngs.values()),
        tuple(a.noise.state.tobytes() for a in trainer.rats),
        trainer.episode,
    )


class TestLoopStructure:
    def test_one_episode_counts(self, paper_cfg):
        cfg = paper_cfg.replace(ddpg={"k_inner": 2})
        trainer = Trainer(cfg)
        trainer.train(1)
        assert len(trainer.dqn.buffer) == 10
        assert [len(a.buffer) for a in trainer.rats] == [20, 20, 20]
        assert trainer.dqn.epsilon.steps == 10

    def test_event_order_within_a_slot(self, toy_cfg):
        cfg = toy_cfg.replace(ddpg={"k_inner": 3})
        trainer = Trainer(cfg, trace=True)
        trainer.train(2)
        expected = []
        for _ in range(2):
            for u in range(2):
                expected.append(("es_select", u))
                for _ in range(3):
                    expected += [("ddpg_act", 0), ("ddpg_act", 1), ("env_step",), ("ddpg_learn", 0), ("ddpg_learn", 1)]
                expected.append(("es_reward", u))
        assert trainer.trace == expected

    def test_record_shapes(self, toy_cfg):
        rec = Trainer(toy_cfg).train(1)[0]
        assert rec.episode == 1
        assert rec.ed_rates.shape == (2,) and rec.link_rates.shape == (2, 2)
        assert rec.rat_rewards.shape == (2,) and rec.assign_share.shape == (2, 2)
        assert 0 <= rec.qos_slots_met <= 2
        assert np.all(rec.assign_share.sum(axis=1) >= 1)

    def test_assignment_always_complete(self, toy_cfg):
        trainer = Trainer(toy_cfg)
        for rec in trainer.train(20):
            assert np.all(rec.assign_share.max(axis=1) > 0)
        assert trainer.assign.any(axis=1).all()


class TestDeterminism:
    def test_same_seed_same_records(self, toy_cfg):
        _, a = train(toy_cfg, 15)
        _, b = train(toy_cfg, 15)
        records_equal(a, b)

    def test_different_seed_differs(self, toy_cfg):
        _, a = train(toy_cfg, 5)
        _, b = train(toy_cfg.replace(run={"seed": 1}), 5)
        assert any(x.rat_rewards.tolist() != y.rat_rewards.tolist() for x, y in zip(a, b))

    def test_parallel_agents_match_serial(self, paper_cfg):
        _, serial = train(paper_cfg, 3)
        _, threaded = train(paper_cfg.replace(run={"parallel_rat_agents": True}), 3)
        records_equal(serial, threaded)

    def test_checkpoint_resume_is_bit_exact(self, toy_cfg, tmp_path):
        straight = Trainer(toy_cfg)
        full = straight.train(12)
        first = Trainer(toy_cfg)
        first.train(6)
        first.save_checkpoint(tmp_path / "ckpt")
        resumed = Trainer.load_checkpoint(tmp_path / "ckpt")
        tail = resumed.train(6)
        records_equal(full[6:], tail)
        assert fingerprint(resumed) == fingerprint(straight)


class TestEvaluation:
    def test_evaluation_mutates_nothing(self, toy_cfg):
        trainer = Trainer(toy_cfg)
        trainer.train(5)
        before = fingerprint(trainer)
        recs = evaluate(trainer, 3)
        assert len(recs) == 3
        assert fingerprint(trainer) == before

    def test_evaluation_is_greedy_and_repeatable(self, toy_cfg):
        trainer = Trainer(toy_cfg)
        trainer.train(5)
        a, b = evaluate(trainer, 4, seed=3), evaluate(trainer, 4, seed=3)
        records_equal(a, b)
        assert all(r.epsilon == 0.0 for r in a)
        assert all(r.policy_utility == r.utility for r in a)


class TestNumericAbort:
    def test_nan_loss_aborts_with_dump(self, toy_cfg, tmp_path):
        trainer = Trainer(toy_cfg, dump_dir=tmp_path)
        trainer.rats[0].critic.weights[0][0, 0] = np.nan
        with pytest.raises(NumericAbort) as info:
            trainer.train(40)
        assert info.value.dump_path is not None
        assert (tmp_path / "numeric_abort.json").exists()


class TestShocks:
    def test_shock_lands_before_first_step_of_next_period(self, toy_cfg):
        cfg = toy_cfg.replace(run={"shock_period_episodes": 5}, ddpg={"k_inner": 1})
        trainer = Trainer(cfg, trace=True)
        positions = []
        recs = trainer.train(11, callback=lambda r: positions.append(trainer.env.positions.copy()))
        assert [r.episode for r in recs if r.shock] == [6, 11]
        i = trainer.trace.index(("shock", 6))
        # 5 episodes of 2 slots, each 1 select + 5 RAT events + 1 reward
        assert i == 5 * 2 * 7
        assert trainer.trace[i + 1] == ("es_select", 0)
        assert not np.array_equal(positions[4], positions[5])
        np.testing.assert_array_equal(positions[3], positions[4])

    def test_period_must_divide_episodes(self, toy_cfg):
        with pytest.raises(ConfigError):
            toy_cfg.replace(run={"episodes": 10, "shock_period_episodes": 4, "convergence_window_episodes": 5})

    def test_mobility_segments(self, toy_cfg):
        cfg = toy_cfg.replace(run={"episodes": 20, "shock_period_episodes": 10, "convergence_window_episodes": 5})
        res = run_mobility_scenario(cfg)
        assert [(s.start, s.end) for s in res.segments] == [(1, 10), (11, 20)]
        assert [r.shock for r in res.records].count(True) == 1


class TestConvergenceDetection:
    def test_constant_series(self):
        assert detect_convergence(np.full(500, 0.7), 200) == 200

    def test_increasing_series(self):
        assert detect_convergence(np.arange(1, 1001, dtype=float), 200) is None

    def test_short_series(self):
        assert detect_convergence(np.ones(50), 200) is None

    def test_window_validation(self):
        with pytest.raises(ValueError):
            detect_convergence(np.ones(10), 1)

    def test_absolute_tolerance(self):
        x = np.r_[np.arange(10.0), np.full(10, 5.0) + 0.2 * (np.arange(10) % 2), 5.0 + 0.1 * (np.arange(10) % 2)]
        assert detect_convergence(x, 10, tol=0.1) == 30
        assert detect_convergence(x, 10, tol=0.0) is None

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), onset=st.integers(250, 700))
    def test_planted_onset(self, seed, onset):
        rng = np.random.default_rng(seed)
        n = 1000
        t = np.arange(1, n + 1)
        series = 1.0 + 0.3 * rng.standard_normal(n) - 0.5 * np.maximum(onset - t, 0) / onset
        plateau = t >= onset
        series[plateau] = 1.0 + rng.uniform(-0.008, 0.008, plateau.sum())
        end = detect_convergence(series, 200)
        assert end is not None
        assert abs(convergence_onset(end, 200) - onset) <= 10

    def test_segments(self):
        class R:
            def __init__(self, v):
                self.policy_utility = v

        series = np.r_[np.linspace(0, 1, 30), np.ones(70), np.linspace(0, 1, 40), np.ones(60)]
        segs = segment_convergence([R(v) for v in series], 100, 20, 0.02)
        assert [(s.start, s.end) for s in segs] == [(1, 100), (101, 200)]
        assert [s.onset for s in segs] == [30, 140]
        assert [s.episodes_to_onset for s in segs] == [30, 40]
        assert [s.episodes_to_converge for s in segs] == [49, 59]
