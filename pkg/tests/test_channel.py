"""Propagation models, fading statistics and mobility."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeprat.channel import (
    ChannelModel,
    ConfigurationError,
    FadingNormals,
    ModelKind,
    cost231_hata_db,
    dbm_to_watt,
    deterministic_gain,
    link_gain,
    mobility_shock,
    psd_dbm_per_mhz_to_watt_per_hz,
    step_mobility,
    watt_to_dbm,
)
from deeprat.env import HetNetEnv

from conftest import CHI2_999, chi_square, make_profile

# Independent evaluation of the COST-231 Hata urban formula (medium city,
# f = 6000 MHz, d = 0.1 km, h_b = 30 m, h_m = 1.5 m), frozen before the build.
COST231_LOSS_DB = 118.650622253659
COST231_GAIN = 1.3643876342149254e-12


class TestUnitConversions:
    def test_zero_dbm_is_one_milliwatt(self):
        assert dbm_to_watt(0.0) == pytest.approx(1e-3, rel=1e-15)

    def test_43_dbm(self):
        np.testing.assert_allclose(dbm_to_watt(43.0), 19.9526, rtol=1e-4)

    def test_noise_psd(self):
        np.testing.assert_allclose(psd_dbm_per_mhz_to_watt_per_hz(-57.0), 1.9953e-15, rtol=1e-4)

    @given(st.floats(-100, 100))
    def test_round_trip(self, v):
        assert watt_to_dbm(dbm_to_watt(v)) == pytest.approx(v, abs=1e-9)


class TestLinkGain:
    def test_exponential_reference_distance(self):
        prof = make_profile("exponential", reference_gain=1.0)
        assert link_gain(prof, 1.0) == pytest.approx(1.0, rel=1e-15)

    def test_cost231_matches_hand_evaluation(self):
        loss = cost231_hata_db(6000.0, 0.1, 30.0, 1.5)
        np.testing.assert_allclose(loss, COST231_LOSS_DB, rtol=1e-12)
        prof = make_profile("cost231_urban", frequency_ghz=6.0)
        np.testing.assert_allclose(link_gain(prof, 100.0), COST231_GAIN, rtol=1e-9)

    def test_mmwave_inverse_square(self):
        prof = make_profile("directional_mmwave", frequency_ghz=28.0, n_antennas=4)
        ratio = link_gain(prof, 10.0, los=True) / link_gain(prof, 20.0, los=True)
        np.testing.assert_allclose(ratio, 4.0, rtol=1e-12)

    def test_mmwave_array_gain(self):
        one = make_profile("directional_mmwave", frequency_ghz=28.0)
        four = make_profile("directional_mmwave", frequency_ghz=28.0, n_antennas=4, antenna_gain_dbi=3.0)
        np.testing.assert_allclose(
            link_gain(four, 50.0) / link_gain(one, 50.0), 10 ** ((10 * math.log10(4) + 3) / 10), rtol=1e-12
        )

    def test_fading_and_shadowing_scale_the_gain(self):
        prof = make_profile("exponential")
        base = link_gain(prof, 30.0)
        np.testing.assert_allclose(link_gain(prof, 30.0, h2=0.5, shadow_db=10.0), base * 5.0, rtol=1e-12)

    def test_distance_clamped_below_one_metre(self):
        prof = make_profile("exponential")
        assert link_gain(prof, 0.01) == link_gain(prof, 1.0)

    def test_unknown_model_rejected(self):
        with pytest.raises(ConfigurationError):
            make_profile("ray_tracing", pathloss_exponents=(2.0, None))

    def test_exponents_required_iff_model_needs_them(self):
        with pytest.raises(ConfigurationError):
            make_profile("cost231_urban", pathloss_exponents=(2.0, None))
        with pytest.raises(ConfigurationError):
            make_profile("exponential", pathloss_exponents=None)

    @pytest.mark.parametrize("field", ["bandwidth_hz", "max_power_w", "noise_psd_w_per_hz"])
    def test_profile_rejects_non_positive(self, field):
        with pytest.raises(ConfigurationError):
            make_profile("exponential", **{field: 0.0})

    @settings(max_examples=200, deadline=None)
    @given(
        kind=st.sampled_from(list(ModelKind)),
        d1=st.floats(1.0, 5000.0),
        factor=st.floats(1.001, 10.0),
        los=st.booleans(),
    )
    def test_monotone_attenuation(self, kind, d1, factor, los):
        prof = make_profile(kind, frequency_ghz=6.0)
        assert deterministic_gain(prof, d1 * factor, los) < deterministic_gain(prof, d1, los)

    @given(d=st.floats(1.0, 5000.0))
    def test_nlos_never_above_los(self, d):
        prof = make_profile("directional_mmwave", frequency_ghz=28.0)
        assert deterministic_gain(prof, d, los=False) <= deterministic_gain(prof, d, los=True)

    @given(d=st.floats(1.0, 1e4), kind=st.sampled_from(list(ModelKind)))
    def test_gain_positive(self, d, kind):
        assert deterministic_gain(make_profile(kind, frequency_ghz=6.0), d) > 0


class TestFading:
    def _channel(self):
        profs = [
            make_profile("directional_mmwave", id=1, frequency_ghz=28.0, shadowing_std_db=3.1),
            make_profile("exponential", id=2, shadowing_std_db=1.8),
        ]
        return ChannelModel(profs, rician_k_db=10.0)

    def test_shadowing_moments(self):
        ch = self._channel()
        normals = FadingNormals.draw(np.random.default_rng(0), (100_000, 2))
        st_ = ch.fading(normals, np.ones((100_000, 2), dtype=bool))
        std = st_.shadow_db.std(axis=0)
        np.testing.assert_allclose(std, [3.1, 1.8], rtol=0.05)
        assert np.all(np.abs(st_.shadow_db.mean(axis=0)) < 0.05 * np.array([3.1, 1.8]))

    def test_unit_mean_power(self):
        ch = self._channel()
        normals = FadingNormals.draw(np.random.default_rng(1), (100_000, 2))
        for los in (True, False):
            h2 = ch.fading(normals, np.full((100_000, 2), los)).h2
            np.testing.assert_allclose(h2.mean(axis=0), 1.0, rtol=0.02)
            assert np.all(h2 >= 0)

    def test_rician_less_spread_than_rayleigh(self):
        ch = self._channel()
        normals = FadingNormals.draw(np.random.default_rng(2), (50_000, 2))
        h2 = ch.fading(normals, np.ones((50_000, 2), dtype=bool)).h2
        # K = 10 dB: var |h|^2 = (1 + 2K)/(K + 1)^2 ~ 0.174; Rayleigh: 1
        np.testing.assert_allclose(h2.var(axis=0), [(1 + 20) / 121, 1.0], rtol=0.05)

    def test_los_only_drawn_for_mmwave(self):
        ch = self._channel()
        d = np.full((1000, 2), 2000.0)
        los = ch.draw_los(d, np.random.default_rng(3))
        assert los[:, 1].all()
        assert los[:, 0].mean() < 0.01

    def test_seed_determinism(self, paper_cfg):
        def gains(seed):
            env = HetNetEnv(paper_cfg.rat_profiles(), paper_cfg.qos_profiles(), np.random.default_rng(seed))
            out = []
            for _ in range(20):
                out.append(env.draw_gains())
                env.advance_mobility()
            return np.array(out)

        np.testing.assert_array_equal(gains(7), gains(7))
        assert not np.array_equal(gains(7), gains(8))


class TestMobility:
    ARENA = (200.0, 200.0)

    def test_zero_speed_is_fixed_point(self, rng):
        pos = rng.uniform(0, 200, (10, 2))
        np.testing.assert_array_equal(step_mobility(pos, np.zeros(10), 5.0, rng, self.ARENA), pos)

    def test_unit_step_east(self, rng):
        pos = np.array([[50.0, 50.0]])
        new = step_mobility(pos, np.array([1.0]), 1.0, rng, self.ARENA, headings=np.array([0.0]))
        assert new[0, 0] - pos[0, 0] == 1.0
        assert new[0, 1] == pos[0, 1]

    def test_reflection_at_wall(self, rng):
        pos = np.array([[199.5, 100.0]])
        new = step_mobility(pos, np.array([1.0]), 1.0, rng, self.ARENA, headings=np.array([0.0]))
        np.testing.assert_allclose(new, [[199.5, 100.0]])

    def test_rejects_non_positive_dt(self, rng):
        with pytest.raises(ValueError):
            step_mobility(np.zeros((1, 2)), np.ones(1), 0.0, rng, self.ARENA)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), speed=st.floats(0.0, 500.0), dt=st.floats(1e-3, 10.0))
    def test_stays_in_arena(self, seed, speed, dt):
        r = np.random.default_rng(seed)
        pos = r.uniform(0, 200, (10, 2))
        new = step_mobility(pos, np.full(10, speed), dt, r, self.ARENA)
        assert np.all((new >= 0) & (new <= 200))
        # distance travelled never exceeds speed * dt
        assert np.all(np.hypot(*(new - pos).T) <= speed * dt + 1e-9)

    def test_shock_moves_everyone(self, rng):
        before = mobility_shock(10, rng, self.ARENA)
        after = mobility_shock(10, rng, self.ARENA)
        assert np.all(np.any(before != after, axis=1))

    def test_shock_uniform_chi_square(self):
        pts = mobility_shock(10_000, np.random.default_rng(5), self.ARENA)
        counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=10, range=[[0, 200], [0, 200]])
        assert chi_square(counts) < CHI2_999[99]
