"""Propagation models, small-scale fading and ED mobility.

Three link models are supported:

* ``directional_mmwave`` -- free-space loss at 1 m plus ``10 n log10(d)`` with
  a LOS or NLOS exponent, and a beamsteering array gain
  ``10 log10(n_antennas) + antenna_gain_dbi`` (perfect alignment).
* ``cost231_urban`` -- COST-231 Hata, medium-city mobile-height correction,
  plus the array and antenna gain.
* ``exponential`` -- ``reference_gain * d**-n``.

Gains are linear power ratios. All functions broadcast over numpy arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ConfigurationError(ValueError):
    """Invalid radio or environment configuration."""


class ModelKind(str, enum.Enum):
    DIRECTIONAL_MMWAVE = "directional_mmwave"
    COST231_URBAN = "cost231_urban"
    EXPONENTIAL = "exponential"


def dbm_to_watt(v):
    return 10.0 ** (np.asarray(v, dtype=np.float64) / 10.0) * 1e-3


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=np.float64) * 1e3)


def psd_dbm_per_mhz_to_watt_per_hz(v):
    return dbm_to_watt(v) / 1e6


def db_to_linear(v):
    return 10.0 ** (np.asarray(v, dtype=np.float64) / 10.0)


@dataclass(frozen=True)
class RatRadioProfile:
    """Physical and economic parameters of one radio access technology."""

    id: int
    name: str
    frequency_ghz: float
    bandwidth_hz: float
    max_power_w: float
    noise_psd_w_per_hz: float
    model_kind: ModelKind
    price_per_bit: float
    position: tuple = (0.0, 0.0)
    pathloss_exponents: tuple | None = None  # (LOS, NLOS); NLOS may be None
    n_antennas: int = 1
    n_paths: int = 1
    antenna_gain_dbi: float = 0.0
    shadowing_std_db: float = 0.0
    bs_height_m: float = 30.0
    ed_height_m: float = 1.5
    reference_gain: float | None = None  # exponential model gain at 1 m

    def __post_init__(self):
        try:
            object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        except ValueError:
            raise ConfigurationError(
                f"RAT {self.id}: unknown channel model {self.model_kind!r}"
            ) from None
        if not self.bandwidth_hz > 0:
            raise ConfigurationError(f"RAT {self.id}: bandwidth must be > 0")
        if not self.max_power_w > 0:
            raise ConfigurationError(f"RAT {self.id}: max power must be > 0")
        if not self.noise_psd_w_per_hz > 0:
            raise ConfigurationError(f"RAT {self.id}: noise PSD must be > 0")
        if not self.price_per_bit >= 0:
            raise ConfigurationError(f"RAT {self.id}: price per bit must be >= 0")
        if self.n_antennas < 1 or self.n_paths < 1:
            raise ConfigurationError(f"RAT {self.id}: antenna/path counts must be >= 1")
        needs = self.model_kind in (ModelKind.DIRECTIONAL_MMWAVE, ModelKind.EXPONENTIAL)
        has = self.pathloss_exponents is not None
        if needs != has:
            raise ConfigurationError(
                f"RAT {self.id}: path-loss exponents are "
                f"{'required' if needs else 'not used'} for {self.model_kind.value}"
            )
        if self.model_kind is ModelKind.DIRECTIONAL_MMWAVE and (
            len(self.pathloss_exponents) != 2 or self.pathloss_exponents[1] is None
        ):
            raise ConfigurationError(f"RAT {self.id}: mmWave needs LOS and NLOS exponents")

    @property
    def wavelength_m(self):
        return SPEED_OF_LIGHT / (self.frequency_ghz * 1e9)

    @property
    def array_gain_db(self):
        return 10.0 * math.log10(self.n_antennas) + self.antenna_gain_dbi

    @property
    def gain_at_1m(self):
        """Exponential-model reference gain; free-space at 1 m by default."""
        if self.reference_gain is not None:
            return self.reference_gain
        return (self.wavelength_m / (4.0 * math.pi)) ** 2


def free_space_loss_1m_db(frequency_ghz):
    return 20.0 * math.log10(4.0 * math.pi * frequency_ghz * 1e9 / SPEED_OF_LIGHT)


def cost231_hata_db(frequency_mhz, distance_km, bs_height_m=30.0, ed_height_m=1.5):
    """COST-231 Hata urban loss with the medium-city correction (C_m = 0)."""
    log_f = np.log10(frequency_mhz)
    a_hm = (1.1 * log_f - 0.7) * ed_height_m - (1.56 * log_f - 0.8)
    return (
        46.3
        + 33.9 * log_f
        - 13.82 * np.log10(bs_height_m)
        - a_hm
        + (44.9 - 6.55 * np.log10(bs_height_m)) * np.log10(distance_km)
    )


def deterministic_gain(profile, distance_m, los=True, min_distance_m=1.0):
    """Large-scale gain without shadowing or small-scale fading."""
    d = np.maximum(np.asarray(distance_m, dtype=np.float64), min_distance_m)
    kind = profile.model_kind
    if kind is ModelKind.DIRECTIONAL_MMWAVE:
        n_los, n_nlos = profile.pathloss_exponents
        n = np.where(los, n_los, n_nlos)
        loss_db = free_space_loss_1m_db(profile.frequency_ghz) + 10.0 * n * np.log10(d)
        return db_to_linear(profile.array_gain_db - loss_db)
    if kind is ModelKind.COST231_URBAN:
        loss_db = cost231_hata_db(
            profile.frequency_ghz * 1e3, d / 1e3, profile.bs_height_m, profile.ed_height_m
        )
        return db_to_linear(profile.array_gain_db - loss_db)
    if kind is ModelKind.EXPONENTIAL:
        n = profile.pathloss_exponents[0]
        return profile.gain_at_1m * db_to_linear(profile.array_gain_db) * d ** (-n)
    raise ConfigurationError(f"unknown channel model {kind!r}")


def link_gain(profile, distance_m, h2=1.0, shadow_db=0.0, los=True, min_distance_m=1.0):
    """Linear power gain g_lu of one link (or an array of links of one RAT).

    ``h2`` is the small-scale power fading |h|^2 and ``shadow_db`` the
    log-normal shadowing draw in dB.
    """
    g = deterministic_gain(profile, distance_m, los, min_distance_m)
    return g * db_to_linear(shadow_db) * np.asarray(h2, dtype=np.float64)


@dataclass
class FadingState:
    """Per-link fading for one time step, arrays of shape (U, L)."""

    h2: np.ndarray
    shadow_db: np.ndarray
    los: np.ndarray


@dataclass
class FadingNormals:
    """Standard-normal draws from which a :class:`FadingState` is built.

    Keeping the raw draws lets the same realisation be re-used under a
    different LOS map (after a mobility shock).
    """

    re: np.ndarray
    im: np.ndarray
    shadow: np.ndarray

    @classmethod
    def draw(cls, rng, shape):
        z = rng.standard_normal((3,) + tuple(shape))
        return cls(z[0], z[1], z[2])


class ChannelModel:
    """Maps ED positions and fading draws to a (U, L) gain matrix."""

    def __init__(
        self,
        profiles,
        rician_k_db=10.0,
        los_decay_m=141.4,
        min_distance_m=1.0,
    ):
        self.profiles = tuple(profiles)
        self.rician_k = float(db_to_linear(rician_k_db))
        self.los_decay_m = float(los_decay_m)
        self.min_distance_m = float(min_distance_m)
        self.rat_positions = np.array([p.position for p in self.profiles], dtype=np.float64)
        self.shadow_std = np.array([p.shadowing_std_db for p in self.profiles])
        self.is_mmwave = np.array(
            [p.model_kind is ModelKind.DIRECTIONAL_MMWAVE for p in self.profiles]
        )

    @property
    def n_rats(self):
        return len(self.profiles)

    def distances(self, ed_positions):
        diff = ed_positions[:, None, :] - self.rat_positions[None, :, :]
        return np.maximum(np.hypot(diff[..., 0], diff[..., 1]), self.min_distance_m)

    def draw_los(self, distances, rng):
        """LOS flags: Bernoulli(exp(-d / decay)) on mmWave links, True elsewhere."""
        p = np.exp(-distances / self.los_decay_m)
        los = rng.random(distances.shape) < p
        return np.where(self.is_mmwave[None, :], los, True)

    def fading(self, normals, los):
        """Rician (K) on mmWave LOS links, Rayleigh on every other link."""
        k = self.rician_k
        rician = self.is_mmwave[None, :] & los
        scale = np.where(rician, math.sqrt(1.0 / (k + 1.0)), math.sqrt(0.5))
        mean = np.where(rician, math.sqrt(k / (k + 1.0)), 0.0)
        # Rician: mean + sqrt(1/(K+1)) * CN(0,1); CN(0,1) has per-axis var 1/2
        re = mean + scale * normals.re * np.where(rician, math.sqrt(0.5), 1.0)
        im = scale * normals.im * np.where(rician, math.sqrt(0.5), 1.0)
        h2 = re * re + im * im
        shadow = normals.shadow * self.shadow_std[None, :]
        return FadingState(h2=h2, shadow_db=shadow, los=np.array(los, dtype=bool))

    def gains(self, ed_positions, fading):
        d = self.distances(ed_positions)
        out = np.empty_like(d)
        for l, prof in enumerate(self.profiles):
            out[:, l] = link_gain(
                prof,
                d[:, l],
                fading.h2[:, l],
                fading.shadow_db[:, l],
                fading.los[:, l],
                self.min_distance_m,
            )
        return out

    def mean_gains(self, ed_positions, los):
        d = self.distances(ed_positions)
        out = np.empty_like(d)
        for l, prof in enumerate(self.profiles):
            out[:, l] = deterministic_gain(prof, d[:, l], los[:, l], self.min_distance_m)
        return out


# -- mobility ----------------------------------------------------------------


def kmh_to_ms(v):
    return np.asarray(v, dtype=np.float64) / 3.6


def _reflect(x, upper):
    """Fold coordinates back into [0, upper] by mirror reflection."""
    period = 2.0 * upper
    x = np.mod(x, period)
    return np.where(x > upper, period - x, x)


def step_mobility(positions, speeds, dt, rng, arena, headings=None):
    """Move each ED ``speed * dt`` metres in a random direction.

    Positions that leave the arena are reflected at its walls. ``headings``
    (radians, 0 = east) replaces the random directions when given.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    if headings is None:
        headings = rng.uniform(0.0, 2.0 * math.pi, size=len(positions))
    headings = np.asarray(headings, dtype=np.float64)
    step = np.asarray(speeds, dtype=np.float64) * dt
    new = positions.copy()
    new[:, 0] += step * np.cos(headings)
    new[:, 1] += step * np.sin(headings)
    new[:, 0] = _reflect(new[:, 0], arena[0])
    new[:, 1] = _reflect(new[:, 1], arena[1])
    return new


def mobility_shock(n_eds, rng, arena):
    """Teleport every ED to an independent uniform point of the arena."""
    return np.column_stack(
        (rng.uniform(0.0, arena[0], n_eds), rng.uniform(0.0, arena[1], n_eds))
    )


def draw_speeds(n_eds, rng, speed_range_kmh):
    lo, hi = speed_range_kmh
    return kmh_to_ms(rng.uniform(lo, hi, n_eds))


def triangle_layout(arena, spacing_m):
    """Three AP sites on an equilateral triangle centred in the arena."""
    cx, cy = arena[0] / 2.0, arena[1] / 2.0
    r = spacing_m / math.sqrt(3.0)
    angles = (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3)
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in angles]
