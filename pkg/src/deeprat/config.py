"""Experiment configuration: YAML text with units spelled out in key names.

``load_config`` validates strictly (unknown keys, missing keys, out-of-range
values) and reports the dotted path of the offending entry.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .channel import (
    ModelKind,
    RatRadioProfile,
    dbm_to_watt,
    psd_dbm_per_mhz_to_watt_per_hz,
    triangle_layout,
)
from .env import EdQosProfile

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Validation failure; the message starts with the offending key path."""


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit(v):
    return 0.0 <= v <= 1.0


def _spec(default=dataclasses.MISSING, check=None, doc=""):
    kw = {"metadata": {"check": check, "doc": doc}}
    if isinstance(default, (list, tuple)):
        kw["default_factory"] = lambda d=tuple(default): d
    elif default is not dataclasses.MISSING:
        kw["default"] = default
    return field(**kw)


@dataclass(frozen=True)
class RunSettings:
    episodes: int = _spec(1500, _positive)
    seed: int = _spec(0, _non_negative)
    shock_period_episodes: int = _spec(0, _non_negative)
    convergence_window_episodes: int = _spec(200, lambda v: v >= 2)
    convergence_tolerance_fraction: float = _spec(0.02, _positive)
    evaluation_episodes: int = _spec(100, _positive)
    parallel_rat_agents: bool = _spec(False)


@dataclass(frozen=True)
class EnvironmentSettings:
    arena_width_m: float = _spec(200.0, _positive)
    arena_height_m: float = _spec(200.0, _positive)
    rat_spacing_m: float = _spec(100.0, _positive)
    ed_speed_min_kmh: float = _spec(2.0, _non_negative)
    ed_speed_max_kmh: float = _spec(6.0, _non_negative)
    slot_duration_ms: float = _spec(1.0, _positive)
    min_distance_m: float = _spec(1.0, _positive)
    normalization_reference_distance_m: float = _spec(10.0, _positive)
    los_decay_distance_m: float = _spec(141.4, _positive)
    rician_k_db: float = _spec(10.0)
    channel_dynamics: str = _spec("fading", lambda v: v in ("fading", "static"))
    reward_constraint_form: str = _spec("hinge", lambda v: v in ("hinge", "linear"))
    reward_rate_units: str = _spec("normalized", lambda v: v in ("normalized", "raw"))
    ed_positions_m: tuple = _spec((), doc="optional fixed [x, y] per ED")


@dataclass(frozen=True)
class DqnSettings:
    hidden_units: tuple = _spec((256, 128), lambda v: len(v) >= 1 and all(w > 0 for w in v))
    learning_rate: float = _spec(8e-4, _positive)
    discount: float = _spec(0.99, _unit)
    buffer_size: int = _spec(1000, _positive)
    batch_size: int = _spec(64, _positive)
    epsilon_start: float = _spec(1.0, _unit)
    epsilon_end: float = _spec(0.005, _unit)
    epsilon_decay_per_step: float = _spec(5e-4, _non_negative)
    target_sync_every_learn_steps: int = _spec(100, _positive)
    reward_eta: float = _spec(1e3, _non_negative)
    reward_zeta: float = _spec(8e-4, _non_negative)
    reward_scale: float = _spec(1.0, _positive)
    grad_clip_norm: float = _spec(1.0, _non_negative)
    adam_beta1: float = _spec(0.9, _unit)
    adam_beta2: float = _spec(0.999, _unit)
    adam_epsilon: float = _spec(1e-8, _positive)


@dataclass(frozen=True)
class DdpgSettings:
    actor_hidden_units: tuple = _spec((16, 16), lambda v: len(v) >= 1 and all(w > 0 for w in v))
    critic_hidden_units: tuple = _spec((16, 16), lambda v: len(v) >= 1 and all(w > 0 for w in v))
    actor_learning_rate: float = _spec(5e-4, _positive)
    critic_learning_rate: float = _spec(5e-4, _positive)
    discount: float = _spec(0.99, _unit)
    buffer_size: int = _spec(500, _positive)
    batch_size: int = _spec(16, _positive)
    tau: float = _spec(0.005, _unit)
    ou_theta: float = _spec(0.15, _non_negative)
    ou_sigma: float = _spec(0.03, _non_negative)
    reward_eta1: float = _spec(1.0, _non_negative)
    reward_eta2: float = _spec(1e3, _non_negative)
    reward_zeta: float = _spec(5e-3, _non_negative)
    reward_scale: float = _spec(1.0, _positive)
    k_inner: int = _spec(1, _positive)
    actor_preactivation_l2: float = _spec(0.0, _non_negative)
    actor_preactivation_bound: float = _spec(0.0, _non_negative)
    grad_clip_norm: float = _spec(1.0, _non_negative)
    adam_beta1: float = _spec(0.9, _unit)
    adam_beta2: float = _spec(0.999, _unit)
    adam_epsilon: float = _spec(1e-8, _positive)


@dataclass(frozen=True)
class RatSpec:
    name: str = _spec()
    frequency_ghz: float = _spec(check=_positive)
    bandwidth_mhz: float = _spec(check=_positive)
    max_power_dbm: float = _spec()
    noise_psd_dbm_per_mhz: float = _spec()
    channel_model: str = _spec(check=lambda v: v in {m.value for m in ModelKind})
    price_euro_per_bit: float = _spec(check=_non_negative)
    pathloss_exponent_los: float | None = _spec(None)
    pathloss_exponent_nlos: float | None = _spec(None)
    n_antennas: int = _spec(1, _positive)
    n_multipaths: int = _spec(1, _positive)
    antenna_gain_dbi: float = _spec(0.0)
    shadowing_std_db: float = _spec(0.0, _non_negative)
    bs_height_m: float = _spec(30.0, _positive)
    ed_height_m: float = _spec(1.5, _positive)
    reference_gain_at_1m: float | None = _spec(None)
    position_m: tuple = _spec((), doc="[x, y]; default: triangle layout")


@dataclass(frozen=True)
class EdSpec:
    r_min_bps: float = _spec(check=_positive)
    alpha: float = _spec(check=_unit)
    gamma: float = _spec(check=_unit)


@dataclass(frozen=True)
class TrainConfig:
    run: RunSettings
    environment: EnvironmentSettings
    dqn: DqnSettings
    ddpg: DdpgSettings
    rats: tuple
    eds: tuple
    schema_version: int = SCHEMA_VERSION

    @property
    def n_rats(self):
        return len(self.rats)

    @property
    def n_eds(self):
        return len(self.eds)

    @property
    def arena(self):
        return (self.environment.arena_width_m, self.environment.arena_height_m)

    def rat_profiles(self):
        default_sites = None
        out = []
        for i, r in enumerate(self.rats):
            if r.position_m:
                pos = tuple(float(c) for c in r.position_m)
            else:
                if default_sites is None:
                    default_sites = _default_sites(self)
                pos = default_sites[i]
            exps = None
            if r.pathloss_exponent_los is not None:
                exps = (r.pathloss_exponent_los, r.pathloss_exponent_nlos)
            out.append(
                RatRadioProfile(
                    id=i + 1,
                    name=r.name,
                    frequency_ghz=r.frequency_ghz,
                    bandwidth_hz=r.bandwidth_mhz * 1e6,
                    max_power_w=float(dbm_to_watt(r.max_power_dbm)),
                    noise_psd_w_per_hz=float(psd_dbm_per_mhz_to_watt_per_hz(r.noise_psd_dbm_per_mhz)),
                    model_kind=ModelKind(r.channel_model),
                    price_per_bit=r.price_euro_per_bit,
                    position=pos,
                    pathloss_exponents=exps,
                    n_antennas=r.n_antennas,
                    n_paths=r.n_multipaths,
                    antenna_gain_dbi=r.antenna_gain_dbi,
                    shadowing_std_db=r.shadowing_std_db,
                    bs_height_m=r.bs_height_m,
                    ed_height_m=r.ed_height_m,
                    reference_gain=r.reference_gain_at_1m,
                )
            )
        return out

    def qos_profiles(self):
        return [EdQosProfile(e.r_min_bps, e.alpha, e.gamma) for e in self.eds]

    def replace(self, **sections):
        """Copy with whole sections or nested fields replaced.

        ``cfg.replace(run={"episodes": 10}, ddpg={"k_inner": 2})``
        """
        updates = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                updates[name] = dataclasses.replace(getattr(self, name), **value)
            else:
                updates[name] = value
        new = dataclasses.replace(self, **updates)
        validate(new)
        return new


def _default_sites(cfg):
    sites = triangle_layout(cfg.arena, cfg.environment.rat_spacing_m)
    if cfg.n_rats <= 3:
        return sites[: cfg.n_rats]
    # beyond three sites: evenly spaced on a ring around the centre
    cx, cy = cfg.arena[0] / 2, cfg.arena[1] / 2
    r = cfg.environment.rat_spacing_m / math.sqrt(3.0)
    return [
        (cx + r * math.cos(2 * math.pi * k / cfg.n_rats), cy + r * math.sin(2 * math.pi * k / cfg.n_rats))
        for k in range(cfg.n_rats)
    ]


# -- parsing -----------------------------------------------------------------

_SECTIONS = {
    "run": RunSettings,
    "environment": EnvironmentSettings,
    "dqn": DqnSettings,
    "ddpg": DdpgSettings,
}


def _coerce(value, annotation, path):
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return None
        raise ConfigError(f"{path}: value required")
    try:
        if ann.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if ann.startswith("int"):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if ann.startswith("float"):
            if isinstance(value, (bool, str)):
                raise TypeError
            v = float(value)
            if not math.isfinite(v):
                raise TypeError
            return v
        if ann.startswith("str"):
            if not isinstance(value, str):
                raise TypeError
            return value
        if ann.startswith("tuple"):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(
                tuple(float(c) for c in v) if isinstance(v, (list, tuple)) else _num(v) for v in value
            )
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {ann.split(' ')[0]}, got {value!r}") from None
    raise ConfigError(f"{path}: unsupported field type {ann}")


def _num(v):
    if isinstance(v, (bool, str)):
        raise TypeError
    f = float(v)
    return int(f) if isinstance(v, int) else f


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in known.items():
        p = f"{path}.{name}"
        if name in data:
            v = _coerce(data[name], f.type, p)
        elif f.default is not dataclasses.MISSING:
            v = f.default
        elif f.default_factory is not dataclasses.MISSING:
            v = f.default_factory()
        else:
            raise ConfigError(f"{p}: missing required key")
        check = f.metadata.get("check")
        if check is not None and v is not None and not check(v):
            raise ConfigError(f"{p}: value {v!r} out of range")
        kwargs[name] = v
    return cls(**kwargs)


def parse_config(data, source="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    allowed = set(_SECTIONS) | {"schema_version", "rats", "eds"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key")
    if "schema_version" not in data:
        raise ConfigError("schema_version: missing required key")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version: expected {SCHEMA_VERSION}, got {data['schema_version']!r}"
        )
    sections = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    for key in ("rats", "eds"):
        if not isinstance(data.get(key), list) or not data[key]:
            raise ConfigError(f"{key}: missing required non-empty list")
    rats = tuple(_build(RatSpec, r, f"rats[{i}]") for i, r in enumerate(data["rats"]))
    eds = tuple(_build(EdSpec, e, f"eds[{i}]") for i, e in enumerate(data["eds"]))
    cfg = TrainConfig(rats=rats, eds=eds, **sections)
    validate(cfg)
    return cfg


def validate(cfg):
    """Cross-field checks that single-key validators cannot express."""
    for i, e in enumerate(cfg.eds):
        if abs(e.alpha + e.gamma - 1.0) > 1e-9:
            raise ConfigError(f"eds[{i}]: alpha + gamma must equal 1 (got {e.alpha + e.gamma})")
    for i, r in enumerate(cfg.rats):
        kind = ModelKind(r.channel_model)
        if kind is ModelKind.COST231_URBAN and r.pathloss_exponent_los is not None:
            raise ConfigError(f"rats[{i}].pathloss_exponent_los: not used by cost231_urban")
        if kind is not ModelKind.COST231_URBAN and r.pathloss_exponent_los is None:
            raise ConfigError(f"rats[{i}].pathloss_exponent_los: missing required key")
        if kind is ModelKind.DIRECTIONAL_MMWAVE and r.pathloss_exponent_nlos is None:
            raise ConfigError(f"rats[{i}].pathloss_exponent_nlos: missing required key")
        if r.position_m and len(r.position_m) != 2:
            raise ConfigError(f"rats[{i}].position_m: expected [x, y]")
    env = cfg.environment
    if env.ed_speed_max_kmh < env.ed_speed_min_kmh:
        raise ConfigError("environment.ed_speed_max_kmh: below ed_speed_min_kmh")
    if env.ed_positions_m and (
        len(env.ed_positions_m) != cfg.n_eds or any(len(p) != 2 for p in env.ed_positions_m)
    ):
        raise ConfigError("environment.ed_positions_m: need one [x, y] per ED")
    run = cfg.run
    if run.convergence_window_episodes > run.episodes:
        raise ConfigError("run.convergence_window_episodes: exceeds run.episodes")
    if run.shock_period_episodes and run.episodes % run.shock_period_episodes:
        raise ConfigError("run.shock_period_episodes: must divide run.episodes")
    if cfg.dqn.epsilon_end > cfg.dqn.epsilon_start:
        raise ConfigError("dqn.epsilon_end: above epsilon_start")
    if cfg.n_rats > 8:
        raise ConfigError("rats: at most 8 RATs (2**L - 1 subset actions)")
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: file not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(data, str(path))


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def config_to_dict(cfg):
    out = {"schema_version": cfg.schema_version}
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        out[name] = {f.name: _plain(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
    out["rats"] = [{f.name: _plain(getattr(r, f.name)) for f in dataclasses.fields(r)} for r in cfg.rats]
    out["eds"] = [{f.name: getattr(e, f.name) for f in dataclasses.fields(e)} for e in cfg.eds]
    return out


def dump_config(cfg):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def paper_config_path():
    return Path(str(resources.files("deeprat") / "configs" / "paper.cfg"))


def load_paper_config():
    return load_config(paper_config_path())
