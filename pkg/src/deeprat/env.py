"""Rates, costs, utilities and constraint bookkeeping for one time slot.

Matrices are indexed ``[u, l]`` (ED, RAT) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .channel import (
    ChannelModel,
    FadingNormals,
    deterministic_gain,
    draw_speeds,
    mobility_shock,
    step_mobility,
)


LN2 = math.log(2.0)


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


@dataclass(frozen=True)
class EdQosProfile:
    r_min: float  # bit/s
    alpha: float
    gamma: float

    def __post_init__(self):
        if not self.r_min > 0:
            raise ValueError("r_min must be > 0")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ValueError("alpha and gamma must lie in [0, 1]")
        if abs(self.alpha + self.gamma - 1.0) > 1e-9:
            raise ValueError(f"alpha + gamma must equal 1, got {self.alpha + self.gamma}")


@dataclass(frozen=True)
class NormalizationSpec:
    r_max: float  # bit/s
    c_max: float  # Euro/s

    def __post_init__(self):
        if not (self.r_max > 0 and self.c_max > 0):
            raise ValueError("normalisation references must be > 0")


def link_rate(bandwidth, assigned_count, gain, power, noise_psd):
    """Shannon bound on a link that gets an equal 1/|U_l| share of the band."""
    n = np.asarray(assigned_count)
    if np.any(n < 1):
        raise ContractViolation("link_rate needs at least one assigned ED")
    share = np.asarray(bandwidth, dtype=np.float64) / n
    snr = np.asarray(gain) * np.asarray(power) / (share * np.asarray(noise_psd))
    return share * np.log1p(snr) / LN2


def monetary_cost(price_per_bit, rate):
    return np.asarray(price_per_bit) * np.asarray(rate)


def link_utility(alpha, gamma, rate, cost, norm):
    return np.asarray(alpha) * (np.asarray(rate) / norm.r_max) - np.asarray(gamma) * (
        np.asarray(cost) / norm.c_max
    )


# absolute slack, in W or bit/s, below which a constraint still counts as met
SLACK_TOLERANCE = 1e-9


@dataclass
class ConstraintReport:
    c1: np.ndarray  # (U,) bool, ED has at least one RAT
    c2_slack: np.ndarray  # (L,) P_max - sum_u p_lu, W
    c3_slack: np.ndarray  # (U,) R_u - R_min, bit/s
    c4: bool  # every p_lu >= 0

    @property
    def feasible(self):
        return bool(
            np.all(self.c1)
            and self.c2_violations == 0
            and self.c3_violations == 0
            and self.c4
        )

    @property
    def c2_violations(self):
        return int(np.sum(self.c2_slack < -SLACK_TOLERANCE))

    @property
    def c3_violations(self):
        return int(np.sum(self.c3_slack < -SLACK_TOLERANCE))


@dataclass
class NetworkSnapshot:
    assign: np.ndarray  # (U, L) bool
    powers: np.ndarray  # (U, L) W, zero off-assignment
    gains: np.ndarray
    snr: np.ndarray
    link_rates: np.ndarray  # bit/s
    ed_rates: np.ndarray  # (U,) bit/s
    costs: np.ndarray  # Euro/s
    utilities: np.ndarray  # normalised, zero off-assignment
    report: ConstraintReport

    @property
    def network_utility(self):
        return network_utility(self.assign, self)

    @property
    def sum_rate(self):
        return float(self.ed_rates.sum())


def network_utility(assign, snapshot):
    """Objective value: utilities summed over assigned links only."""
    return float(np.sum(np.where(assign, snapshot.utilities, 0.0)))


def check_constraints(assign, powers, ed_rates, qos, profiles):
    assign = np.asarray(assign, dtype=bool)
    p_max = np.array([p.max_power_w for p in profiles])
    r_min = np.array([q.r_min for q in qos])
    used = np.sum(np.where(assign, powers, 0.0), axis=0)
    return ConstraintReport(
        c1=assign.sum(axis=1) >= 1,
        c2_slack=p_max - used,
        c3_slack=np.asarray(ed_rates) - r_min,
        c4=bool(np.all(np.asarray(powers) >= 0.0)),
    )


def compute_snapshot(assign, powers, gains, profiles, qos, norm):
    """Pure evaluation of one slot for a fixed gain matrix.

    Powers on unassigned links are zeroed and a RAT with no EDs produces no
    rate.
    """
    assign = np.asarray(assign, dtype=bool)
    powers = np.where(assign, np.asarray(powers, dtype=np.float64), 0.0)
    bw = np.array([p.bandwidth_hz for p in profiles])
    noise = np.array([p.noise_psd_w_per_hz for p in profiles])
    eps = np.array([p.price_per_bit for p in profiles])
    alpha = np.array([q.alpha for q in qos])[:, None]
    gamma = np.array([q.gamma for q in qos])[:, None]

    counts = assign.sum(axis=0)
    share = bw / np.maximum(counts, 1)
    snr = np.where(assign, gains * powers / (share * noise), 0.0)
    rates = np.where(assign, share * np.log1p(snr) / LN2, 0.0)
    costs = eps * rates
    utilities = np.where(assign, link_utility(alpha, gamma, rates, costs, norm), 0.0)
    ed_rates = rates.sum(axis=1)
    report = check_constraints(assign, powers, ed_rates, qos, profiles)
    return NetworkSnapshot(
        assign=assign,
        powers=powers,
        gains=gains,
        snr=snr,
        link_rates=rates,
        ed_rates=ed_rates,
        costs=costs,
        utilities=utilities,
        report=report,
    )


def reference_normalization(profiles, reference_distance_m=10.0):
    """r_max: best sole-occupancy full-power rate at the reference distance.

    c_max = max price per bit times r_max.
    """
    best = 0.0
    for p in profiles:
        g = float(deterministic_gain(p, reference_distance_m, los=True))
        w = p.bandwidth_hz
        best = max(best, w * np.log2(1.0 + g * p.max_power_w / (w * p.noise_psd_w_per_hz)))
    c_max = max(p.price_per_bit for p in profiles) * best
    if c_max <= 0:
        c_max = best  # every RAT free; any positive scale works
    return NormalizationSpec(r_max=best, c_max=c_max)


class HetNetEnv:
    """Stateful wrapper: ED positions, LOS map, fading RNG.

    The environment advances only through :meth:`step` (one slot),
    :meth:`advance_mobility` (once per episode) and :meth:`shock`.
    """

    def __init__(
        self,
        profiles,
        qos,
        rng,
        arena=(200.0, 200.0),
        speed_range_kmh=(2.0, 6.0),
        mobility_dt_s=0.01,
        rician_k_db=10.0,
        los_decay_m=141.4,
        min_distance_m=1.0,
        reference_distance_m=10.0,
        static=False,
    ):
        self.profiles = tuple(profiles)
        self.qos = tuple(qos)
        self.rng = rng
        self.arena = tuple(float(a) for a in arena)
        self.speed_range_kmh = tuple(speed_range_kmh)
        self.mobility_dt_s = float(mobility_dt_s)
        self.static = bool(static)
        self.channel = ChannelModel(self.profiles, rician_k_db, los_decay_m, min_distance_m)
        self.norm = reference_normalization(self.profiles, reference_distance_m)
        self.r_min = np.array([q.r_min for q in self.qos])
        self.positions = mobility_shock(self.n_eds, rng, self.arena)
        self.speeds = draw_speeds(self.n_eds, rng, self.speed_range_kmh)
        self.los = self.channel.draw_los(self.channel.distances(self.positions), rng)

    @property
    def n_eds(self):
        return len(self.qos)

    @property
    def n_rats(self):
        return len(self.profiles)

    @property
    def max_powers(self):
        return np.array([p.max_power_w for p in self.profiles])

    def place(self, positions, los=None):
        """Pin ED positions (and optionally the LOS map) explicitly."""
        self.positions = np.array(positions, dtype=np.float64).reshape(self.n_eds, 2)
        if los is None:
            los = self.channel.draw_los(self.channel.distances(self.positions), self.rng)
        self.los = np.array(los, dtype=bool)

    def draw_normals(self):
        return FadingNormals.draw(self.rng, (self.n_eds, self.n_rats))

    def gains_for(self, normals):
        if self.static:
            return self.channel.mean_gains(self.positions, self.los)
        return self.channel.gains(self.positions, self.channel.fading(normals, self.los))

    def draw_gains(self):
        if self.static:
            return self.channel.mean_gains(self.positions, self.los)
        return self.gains_for(self.draw_normals())

    def evaluate(self, assign, powers, gains):
        return compute_snapshot(assign, powers, gains, self.profiles, self.qos, self.norm)

    def step(self, assign, powers, gains=None):
        """One slot: draw fading (unless ``gains`` given) and score the decision."""
        assign = np.asarray(assign, dtype=bool)
        if not np.all(assign.any(axis=1)):
            raise ContractViolation("every ED needs at least one RAT (C1)")
        if gains is None:
            gains = self.draw_gains()
        return self.evaluate(assign, powers, gains)

    def advance_mobility(self):
        if self.static:
            return
        self.positions = step_mobility(
            self.positions, self.speeds, self.mobility_dt_s, self.rng, self.arena
        )

    def shock(self):
        """Re-randomise every ED position and speed and redraw the LOS map."""
        self.positions = mobility_shock(self.n_eds, self.rng, self.arena)
        self.speeds = draw_speeds(self.n_eds, self.rng, self.speed_range_kmh)
        self.los = self.channel.draw_los(self.channel.distances(self.positions), self.rng)
