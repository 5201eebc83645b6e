"""Comparison schemes and the convex power-allocation oracle.

With the assignment held fixed, the objective separates over RATs. Inside
one RAT each link contributes ``c_u * R(p_u)`` with
``c_u = alpha_u / r_max - gamma_u * price / c_max``, which is concave in
``p_u`` whenever ``c_u >= 0`` and decreasing otherwise, so the optimum
puts zero power on links with ``c_u < 0`` and water-fills the rest.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .env import reference_normalization
from .orchestrator import deeprat_policy, evaluation_env, run_policy

LN2 = math.log(2.0)


class BaselineKind(str, enum.Enum):
    MULTI_MODE = "multi_mode"
    RANDOM_ASSIGN = "random_assign"
    FIXED_EQUAL_POWER = "fixed_equal_power"
    CONVEX_ORACLE = "convex_oracle"


# -- assignments ---------------------------------------------------------------


def multi_mode_assign(snapshot, qos=None):
    """One RAT per ED: the column with the highest utility estimate.

    ``np.argmax`` returns the first maximum, so ties go to the lowest RAT
    index. ``qos`` is accepted for interface symmetry and not used.
    """
    util = np.asarray(snapshot.utilities if hasattr(snapshot, "utilities") else snapshot)
    assign = np.zeros(util.shape, dtype=bool)
    assign[np.arange(util.shape[0]), np.argmax(util, axis=1)] = True
    return assign


def random_assign(n_eds, n_rats, rng):
    """One uniformly chosen RAT per ED."""
    assign = np.zeros((n_eds, n_rats), dtype=bool)
    assign[np.arange(n_eds), rng.integers(0, n_rats, size=n_eds)] = True
    return assign


def fixed_equal_power(n_eds, n_rats, profiles):
    """Every ED on every RAT, each RAT's budget split evenly."""
    if n_eds < 1:
        raise ValueError("need at least one ED")
    assign = np.ones((n_eds, n_rats), dtype=bool)
    p_max = np.array([p.max_power_w for p in profiles], dtype=np.float64)
    powers = np.broadcast_to(p_max / n_eds, (n_eds, n_rats)).copy()
    return assign, powers


# -- projection ----------------------------------------------------------------


def project_simplex_box(y, budget=1.0, weights=None):
    """Nearest point of ``{x >= 0, sum(x) <= budget}`` to ``y``.

    Distance is ``sum(w * (x - y)**2)`` (Euclidean when ``weights`` is
    None). The solution is ``max(0, y - lam / w)`` with ``lam >= 0`` found
    exactly from the sorted breakpoints ``w * y``.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    x = np.maximum(y, 0.0)
    if x.sum() <= budget:
        return x
    bp = w * y
    order = np.argsort(-bp)
    ys = np.cumsum(y[order])
    inv = np.cumsum(1.0 / w[order])
    lam = 0.0
    for k in range(len(y)):
        lam = (ys[k] - budget) / inv[k]
        nxt = bp[order[k + 1]] if k + 1 < len(y) else -np.inf
        if lam >= nxt:
            break
    return np.maximum(y - lam / w, 0.0)


# -- convex oracle -------------------------------------------------------------


@dataclass
class OracleResult:
    powers: np.ndarray  # (U, L) W
    objective: float  # network utility at these powers
    kkt_residual: float  # worst RAT
    iterations: int  # worst RAT
    converged: bool
    objective_trace: list  # per RAT, objective after every iteration


def _link_terms(assign, gains, profiles, qos, norm):
    """Per-link coefficient ``c``, band share ``s`` and SNR scale ``a``.

    With ``x = p / P_max`` a link's rate is ``s * log2(1 + a * x)``.
    """
    assign = np.asarray(assign, dtype=bool)
    counts = np.maximum(assign.sum(axis=0), 1)
    alpha = np.array([q.alpha for q in qos])[:, None]
    gamma = np.array([q.gamma for q in qos])[:, None]
    price = np.array([p.price_per_bit for p in profiles])[None, :]
    bw = np.array([p.bandwidth_hz for p in profiles])
    noise = np.array([p.noise_psd_w_per_hz for p in profiles])
    p_max = np.array([p.max_power_w for p in profiles])
    c = alpha / norm.r_max - gamma * price / norm.c_max
    s = np.broadcast_to(bw / counts, assign.shape)
    a = np.asarray(gains) * p_max / (s * noise)
    return c, s, a


def _objective(x, c, s, a):
    return float(np.sum(c * s * np.log1p(a * x)) / LN2)


def _gradient(x, c, s, a):
    return c * s * a / ((1.0 + a * x) * LN2)


def kkt_residual(x, grad, budget=1.0):
    """Scale-free projected-gradient residual ``|x - P(x + g/|g|max)|_inf``."""
    scale = float(np.max(np.abs(grad))) if len(grad) else 0.0
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(x - project_simplex_box(x + grad / scale, budget))))


def _solve_rat(c, s, a, tol, max_iter):
    n = len(c)
    x = np.full(n, 1.0 / n)
    trace = [_objective(x, c, s, a)]
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = _gradient(x, c, s, a)
        res = kkt_residual(x, g)
        if res < tol:
            return x, res, it - 1, True, trace
        # diagonal curvature turns each step into a scaled projection
        curv = c * s * a * a / ((1.0 + a * x) ** 2 * LN2)
        floor = 1e-12 * max(float(np.max(np.abs(g))), 1e-300)
        d = np.maximum(curv, floor)
        z = project_simplex_box(x + g / d, 1.0, weights=d)
        step = z - x
        slope = float(g @ step)
        f0 = trace[-1]
        t = 1.0
        while True:
            cand = x + t * step
            f1 = _objective(cand, c, s, a)
            if f1 >= f0 + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if f1 < f0 or not np.any(cand != x):
            break  # no ascent left at machine precision
        x = np.clip(cand, 0.0, None)
        if x.sum() > 1.0:
            x = project_simplex_box(x, 1.0)
        trace.append(_objective(x, c, s, a))
    g = _gradient(x, c, s, a)
    res = kkt_residual(x, g)
    return x, res, it, res < tol, trace


def convex_power_oracle(
    assign, gains, profiles, qos, norm=None, tol=1e-6, max_iter=100_000
):
    """Utility-maximizing powers for a fixed assignment.

    Projected (diagonally scaled) gradient ascent per RAT with Armijo
    backtracking, stopping when the KKT residual drops below ``tol``. QoS
    floors are not enforced. ``converged`` is False when the iteration cap
    is hit; the best iterate is still returned.
    """
    assign = np.asarray(assign, dtype=bool)
    if norm is None:
        norm = reference_normalization(profiles)
    c, s, a = _link_terms(assign, gains, profiles, qos, norm)
    p_max = np.array([p.max_power_w for p in profiles])
    powers = np.zeros(assign.shape)
    worst_res, worst_it, ok, traces = 0.0, 0, True, []
    total = 0.0
    for l in range(assign.shape[1]):
        idx = np.flatnonzero(assign[:, l])
        if len(idx) == 0:
            traces.append([])
            continue
        x, res, it, conv, trace = _solve_rat(c[idx, l], s[idx, l], a[idx, l], tol, max_iter)
        powers[idx, l] = x * p_max[l]
        total += trace[-1] if trace else 0.0
        worst_res, worst_it, ok = max(worst_res, res), max(worst_it, it), ok and conv
        traces.append(trace)
    return OracleResult(powers, total, worst_res, worst_it, ok, traces)


def power_gradient(assign, powers, gains, profiles, qos, norm):
    """d(network utility)/d(p_lu) in 1/W, zero on unassigned links."""
    assign = np.asarray(assign, dtype=bool)
    c, s, a = _link_terms(assign, gains, profiles, qos, norm)
    p_max = np.array([p.max_power_w for p in profiles])
    x = np.asarray(powers) / p_max
    return np.where(assign, _gradient(x, c, s, a) / p_max, 0.0)


# -- scheme runners ------------------------------------------------------------


def multi_mode_policy(trainer, env):
    """Greedy single-RAT choice from an all-RAT probe on the last seen channel."""
    U, L = trainer.n_eds, trainer.n_rats
    ones = np.ones((U, L), dtype=bool)
    state = {"gains": env.channel.mean_gains(env.positions, env.los)}

    def decide(u, prev, gains):
        probe = env.evaluate(ones, trainer.policy_powers(prev, ones), state["gains"])
        assign = multi_mode_assign(probe)
        state["gains"] = gains  # becomes the "last seen" channel for the next slot
        return assign, trainer.policy_powers(prev, assign)

    return decide


def random_policy(trainer, rng):
    """Uniform single-RAT assignment drawn at the start of every episode."""
    state = {"assign": None}

    def decide(u, prev, gains):
        if u == 0 or state["assign"] is None:
            state["assign"] = random_assign(trainer.n_eds, trainer.n_rats, rng)
        return state["assign"], trainer.policy_powers(prev, state["assign"])

    return decide


def fixed_policy(trainer):
    assign, powers = fixed_equal_power(trainer.n_eds, trainer.n_rats, trainer.env.profiles)

    def decide(u, prev, gains):
        return assign, powers

    return decide


def oracle_policy(trainer):
    env = trainer.env
    ones = np.ones((trainer.n_eds, trainer.n_rats), dtype=bool)

    def decide(u, prev, gains):
        res = convex_power_oracle(ones, gains, env.profiles, env.qos, env.norm)
        return ones, res.powers

    return decide


def evaluate_schemes(trainer, episodes=None, seed=None, kinds=None):
    """DeepRAT and each baseline on identical channel sequences.

    Returns ``{"deeprat": records, BaselineKind.value: records, ...}``.
    """
    if episodes is None:
        episodes = trainer.config.run.evaluation_episodes
    kinds = list(BaselineKind) if kinds is None else [BaselineKind(k) for k in kinds]
    out = {}
    env = evaluation_env(trainer, seed)
    out["deeprat"] = run_policy(env, episodes, deeprat_policy(trainer), prev=trainer.prev)
    for kind in kinds:
        env = evaluation_env(trainer, seed)
        if kind is BaselineKind.MULTI_MODE:
            decide = multi_mode_policy(trainer, env)
        elif kind is BaselineKind.RANDOM_ASSIGN:
            decide = random_policy(trainer, np.random.default_rng(
                np.random.SeedSequence(trainer.config.run.seed, spawn_key=(99,))))
        elif kind is BaselineKind.FIXED_EQUAL_POWER:
            decide = fixed_policy(trainer)
        else:
            decide = oracle_policy(trainer)
        out[kind.value] = run_policy(env, episodes, decide, scheme=kind.value, prev=trainer.prev)
    return out
