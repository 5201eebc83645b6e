"""Experiment recipes that turn a config and a seed list into data files.

Every seed writes into its own ``seed_<n>/`` subdirectory under the output
directory, with CSV streams, a manifest and a ``status.json``. After the
last seed, :func:`summarize` aggregates whatever streams are present.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .baselines import evaluate_schemes
from .config import ConfigError, config_to_dict, load_config, load_paper_config
from .metrics import (
    build_id,
    MetricsWriter,
    read_status,
    read_table,
    record_columns,
    write_manifest,
    write_records,
    write_status,
    write_table,
)
from .orchestrator import (
    NumericAbort,
    Trainer,
    convergence_onset,
    detect_convergence,
    evaluate,
    segment_convergence,
)

log = logging.getLogger(__name__)

RECIPES = ("train", "evaluate", "baselines", "mobility", "cdf", "sweep")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_SHOCK_PERIOD = 1000
DEFAULT_SWEEP_K = (1, 2, 4)

# Published reference values, kept for side-by-side display only. They come
# from a different simulator scale and are never compared against.
REFERENCE = {
    "utility": {
        "deeprat": 1.73,
        "multi_mode": 1.58,
        "convex_oracle": 1.52,
        "random_assign": 1.33,
        "fixed_equal_power": 1.4,
    },
    "sum_rate_gbps": {
        "deeprat": 4.2,
        "convex_oracle": 4.33,
        "multi_mode": 3.86,
        "random_assign": 3.23,
        "fixed_equal_power": 3.42,
    },
    "convergence_episode": 226,
    "ed2_rate_share_percent": [99.1, 0.36, 0.54],
}

# (better, worse, minimum relative margin) pairs reported by summarize
ORDERING = (
    ("utility", "deeprat", "multi_mode", 0.03),
    ("utility", "deeprat", "random_assign", 0.03),
    ("utility", "deeprat", "fixed_equal_power", 0.03),
    ("utility", "multi_mode", "random_assign", 0.0),
    ("sum_rate", "deeprat", "random_assign", 0.10),
    ("sum_rate", "deeprat", "fixed_equal_power", 0.10),
)


@dataclass
class ExperimentRecipe:
    name: str
    config_path: Path | None  # None = bundled paper.cfg
    out_dir: Path
    seeds: tuple = (0,)
    episodes: int | None = None
    shock_period: int | None = None
    k_inner: int | None = None
    evaluation_episodes: int | None = None
    sweep_k: tuple = DEFAULT_SWEEP_K
    jobs: int = 1
    extra: dict = field(default_factory=dict)  # section -> {key: value} overrides

    def __post_init__(self):
        if self.name not in RECIPES:
            raise ConfigError(f"recipe: unknown recipe {self.name!r} (expected one of {RECIPES})")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds: seeds must be non-negative")
        self.out_dir = Path(self.out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"out: cannot create {self.out_dir} ({exc})") from None
        if not os.access(self.out_dir, os.W_OK):
            raise ConfigError(f"out: {self.out_dir} is not writable")

    def config_for(self, seed):
        """The validated config of one seed, with command-line overrides applied."""
        cfg = load_paper_config() if self.config_path is None else load_config(self.config_path)
        run = {"seed": seed}
        if self.episodes is not None:
            run["episodes"] = self.episodes
        if self.evaluation_episodes is not None:
            run["evaluation_episodes"] = self.evaluation_episodes
        if self.name == "mobility":
            period = self.shock_period or cfg.run.shock_period_episodes or DEFAULT_SHOCK_PERIOD
            run["shock_period_episodes"] = period
        elif self.shock_period is not None:
            run["shock_period_episodes"] = self.shock_period
        sections = {name: dict(v) for name, v in self.extra.items()}
        sections.setdefault("run", {}).update(run)
        if self.k_inner is not None:
            sections.setdefault("ddpg", {})["k_inner"] = self.k_inner
        try:
            return cfg.replace(**sections)
        except TypeError as exc:
            raise ConfigError(f"override: {exc}") from None

    def seed_dir(self, seed):
        return self.out_dir / f"seed_{seed}"


# -- per-seed runners ------------------------------------------------------------


def _meta(recipe, seed, scheme="deeprat"):
    return {"recipe": recipe.name, "scheme": scheme, "seed": seed, "build_id": build_id()}


def _train_stream(recipe, cfg, seed, out, name="train"):
    """Train with a live CSV stream; returns the trainer."""
    trainer = Trainer(cfg, dump_dir=out)
    every = max(cfg.run.episodes // 10, 1)
    cols = record_columns(cfg.n_eds, cfg.n_rats)
    try:
        with MetricsWriter(out, name, cols, _meta(recipe, seed)) as w:

            def cb(rec):
                w.write_record(rec)
                if rec.episode % every == 0:
                    log.info(
                        "seed %d episode %d: utility %.5g, policy %.5g, eps %.3f",
                        seed, rec.episode, rec.utility, rec.policy_utility, rec.epsilon,
                    )

            trainer.train(cfg.run.episodes, cb)
    finally:
        trainer.close()
    return trainer


def rate_share_tables(records):
    """Per-ED and per-RAT percentage splits of the delivered rate.

    Returns ``(ed_share, rat_share, assign_share)``: ``ed_share[u, l]`` is
    the percentage of ED u's rate carried by RAT l, ``rat_share[u, l]`` the
    percentage of RAT l's rate delivered to ED u, and ``assign_share`` the
    fraction of slots each link was assigned. Rows (columns) with no rate
    are left at zero.
    """
    link = np.sum([r.link_rates for r in records], axis=0)
    per_ed = link.sum(axis=1, keepdims=True)
    per_rat = link.sum(axis=0, keepdims=True)
    ed_share = np.divide(100.0 * link, per_ed, out=np.zeros_like(link), where=per_ed > 0)
    rat_share = np.divide(100.0 * link, per_rat, out=np.zeros_like(link), where=per_rat > 0)
    assign = np.mean([r.assign_share for r in records], axis=0)
    return ed_share, rat_share, assign


def _matrix_rows(mat, names):
    return [
        {"ed": u + 1, **{names[l]: float(mat[u, l]) for l in range(mat.shape[1])}}
        for u in range(mat.shape[0])
    ]


def write_share_tables(out, records, rat_names, meta):
    ed_share, rat_share, assign = rate_share_tables(records)
    cols = ["ed"] + list(rat_names)
    write_table(out, "rate_share_by_ed", cols, _matrix_rows(ed_share, rat_names), meta)
    write_table(out, "rate_share_by_rat", cols, _matrix_rows(rat_share, rat_names), meta)
    write_table(out, "assignment", cols, _matrix_rows(assign, rat_names), meta)
    return ed_share, rat_share, assign


def utility_cdf(values):
    """Sorted values with empirical CDF levels ``k / n``, ``k = 1..n``."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return v, np.arange(1, len(v) + 1) / len(v)


def _run_schemes(recipe, cfg, seed, out, trainer):
    results = evaluate_schemes(trainer, cfg.run.evaluation_episodes)
    for scheme, recs in results.items():
        write_records(out, scheme, recs, _meta(recipe, seed, scheme))
    return results


def _write_cdf(recipe, seed, out, results):
    rows = []
    for scheme, recs in results.items():
        vals, levels = utility_cdf([r.utility for r in recs])
        rows += [
            {"scheme": scheme, "rank": k + 1, "utility": float(v), "cdf": float(c)}
            for k, (v, c) in enumerate(zip(vals, levels))
        ]
    meta = {"recipe": recipe.name, "seed": seed}
    write_table(out, "cdf", ["scheme", "rank", "utility", "cdf"], rows, meta)


def _segment_rows(segments):
    return [
        {
            "segment": i + 1,
            "start": s.start,
            "end": s.end,
            "converged_episode": s.converged,
            "onset_episode": s.onset,
            "episodes_to_converge": s.episodes_to_converge,
            "episodes_to_onset": s.episodes_to_onset,
        }
        for i, s in enumerate(segments)
    ]


SEGMENT_COLUMNS = (
    "segment",
    "start",
    "end",
    "converged_episode",
    "onset_episode",
    "episodes_to_converge",
    "episodes_to_onset",
)


def run_seed(recipe, seed):
    """Run one seed of ``recipe``; returns the exit status for that seed."""
    out = recipe.seed_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        cfg = recipe.config_for(seed)
    except ConfigError as exc:
        write_status(out, "config_error", error=str(exc))
        raise
    write_status(out, "running", recipe=recipe.name, seed=seed)
    (out / "config.cfg").write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    try:
        _dispatch(recipe, cfg, seed, out)
    except NumericAbort as exc:
        dump = None if exc.dump_path is None else str(exc.dump_path)
        write_status(out, "numeric_abort", error=str(exc), dump=dump)
        log.error("seed %d aborted: %s", seed, exc)
        return EXIT_NUMERIC
    except Exception as exc:
        write_status(out, "failed", error=repr(exc))
        raise
    wall = time.perf_counter() - t0
    write_manifest(out, recipe=recipe.name, seed=seed, wall_clock_s=round(wall, 3))
    write_status(out, "complete", recipe=recipe.name, seed=seed)
    return EXIT_OK


def _dispatch(recipe, cfg, seed, out):
    name = recipe.name
    if name == "sweep":
        _run_sweep(recipe, cfg, seed, out)
        return
    trainer = _train_stream(recipe, cfg, seed, out)
    if name == "train":
        trainer.save_checkpoint(out / "checkpoint")
    elif name == "evaluate":
        recs = evaluate(trainer)
        write_records(out, "evaluate", recs, _meta(recipe, seed))
        names = [r.name for r in cfg.rats]
        write_share_tables(out, recs, names, {"recipe": name, "seed": seed})
    elif name in ("baselines", "cdf"):
        results = _run_schemes(recipe, cfg, seed, out, trainer)
        if name == "cdf":
            _write_cdf(recipe, seed, out, results)
    elif name == "mobility":
        segs = segment_convergence(
            trainer.records,
            cfg.run.shock_period_episodes,
            cfg.run.convergence_window_episodes,
            cfg.run.convergence_tolerance_fraction,
        )
        meta = {"recipe": name, "seed": seed}
        write_table(out, "segments", SEGMENT_COLUMNS, _segment_rows(segs), meta)


def _run_sweep(recipe, cfg, seed, out):
    """Inner-iteration count sweep: train and evaluate once per K."""
    rows = []
    for k in recipe.sweep_k if recipe.k_inner is None else (recipe.k_inner,):
        kcfg = cfg.replace(ddpg={"k_inner": int(k)})
        trainer = _train_stream(recipe, kcfg, seed, out, name=f"train_k{k}")
        recs = evaluate(trainer)
        write_records(out, f"evaluate_k{k}", recs, _meta(recipe, seed))
        pol = [r.policy_utility for r in trainer.records]
        conv = detect_convergence(
            pol, kcfg.run.convergence_window_episodes,
            tol_fraction=kcfg.run.convergence_tolerance_fraction,
        )
        rows.append(
            {
                "k_inner": int(k),
                "utility": float(np.mean([r.utility for r in recs])),
                "sum_rate": float(np.mean([r.sum_rate for r in recs])),
                "qos_rate": qos_rate(recs, kcfg.n_eds),
                "converged_episode": conv,
            }
        )
    cols = ["k_inner", "utility", "sum_rate", "qos_rate", "converged_episode"]
    write_table(out, "sweep", cols, rows, {"recipe": recipe.name, "seed": seed})


def qos_rate(records, n_eds):
    """Fraction of slots in which every ED met its rate floor."""
    slots = len(records) * n_eds
    return float(sum(r.qos_slots_met for r in records) / slots) if slots else 0.0


def run_recipe(recipe):
    """Run every seed, then summarize. Returns 0, 2 (config) or 3 (numeric)."""
    try:
        for seed in recipe.seeds:
            recipe.config_for(seed)  # fail fast before any training
    except ConfigError as exc:
        log.error("%s", exc)
        write_status(recipe.out_dir, "config_error", error=str(exc))
        return EXIT_CONFIG
    write_status(recipe.out_dir, "running", recipe=recipe.name, seeds=list(recipe.seeds))
    if recipe.jobs > 1 and len(recipe.seeds) > 1:
        with ProcessPoolExecutor(max_workers=recipe.jobs) as pool:
            codes = list(pool.map(run_seed, [recipe] * len(recipe.seeds), recipe.seeds))
    else:
        codes = [run_seed(recipe, s) for s in recipe.seeds]
    code = max(codes)
    if code == EXIT_OK:
        summary = summarize(recipe.out_dir)
        write_summary(recipe.out_dir, summary)
    write_status(
        recipe.out_dir,
        "complete" if code == EXIT_OK else "numeric_abort",
        recipe=recipe.name,
        seeds=list(recipe.seeds),
        seed_status=dict(zip(map(str, recipe.seeds), codes)),
    )
    return code


# -- summary ---------------------------------------------------------------------


@dataclass
class StreamSummary:
    seed: int
    stream: str
    episodes: int
    utility: float
    sum_rate: float
    qos_rate: float
    converged_episode: int | None  # training streams only
    steady_from: int  # first episode of the averaging window


@dataclass
class Summary:
    runs: list
    aggregate: dict  # stream -> {metric: (mean, std, n)}
    ordering: list  # dicts with better/worse/margin/holds per seed and overall
    reference: dict = field(default_factory=lambda: dict(REFERENCE))


def _n_eds(row):
    return sum(1 for k in row if k.startswith("ed_rate_"))


def summarize_stream(rows, seed, stream, window=200, tol_fraction=0.02):
    """Steady-state means of one stream.

    Training streams (those whose name starts with ``train``) are averaged
    from the onset of the first steady window of ``policy_utility`` to the
    end; a stream that never settles is averaged over its last ``window``
    episodes and reported with ``converged_episode=None``. Evaluation
    streams run after training and are averaged in full.
    """
    if not rows:
        raise ValueError(f"{stream}: empty stream")
    util = np.array([r["utility"] for r in rows], dtype=np.float64)
    rate = np.array([r["sum_rate"] for r in rows], dtype=np.float64)
    met = np.array([r["qos_slots_met"] for r in rows], dtype=np.float64)
    conv = None
    start = 0
    if stream.startswith("train"):
        pol = [r["policy_utility"] for r in rows]
        conv = detect_convergence(pol, min(window, len(rows)), tol_fraction=tol_fraction)
        if conv is not None:
            start = convergence_onset(conv, min(window, len(rows))) - 1
        else:
            start = max(len(rows) - window, 0)
    n_eds = _n_eds(rows[0])
    return StreamSummary(
        seed=seed,
        stream=stream,
        episodes=len(rows),
        utility=float(np.mean(util[start:])),
        sum_rate=float(np.mean(rate[start:])),
        qos_rate=float(np.sum(met[start:]) / (n_eds * (len(rows) - start))),
        converged_episode=conv,
        steady_from=start + 1,
    )


def _seed_of(path):
    return int(path.name.split("_", 1)[1])


def summarize(metrics_dir, window=None, tol_fraction=None):
    """Per-seed and cross-seed steady-state table for every CSV stream found.

    ``window`` and ``tol_fraction`` default to the values in each seed's
    stored config (or 200 and 0.02 when it is missing).
    """
    root = Path(metrics_dir)
    runs = []
    for sdir in sorted(root.glob("seed_*"), key=_seed_of):
        status = read_status(sdir)
        if status is not None and status.get("status") != "complete":
            continue
        w, tol = window, tol_fraction
        cfg_path = sdir / "config.cfg"
        if cfg_path.exists() and (w is None or tol is None):
            run_cfg = yaml.safe_load(cfg_path.read_text()).get("run", {})
            w = w or run_cfg.get("convergence_window_episodes")
            tol = tol or run_cfg.get("convergence_tolerance_fraction")
        w, tol = w or 200, tol or 0.02
        for csv_path in sorted(sdir.glob("*.csv")):
            stream = csv_path.stem
            rows = read_table(csv_path)
            if not rows or "utility" not in rows[0] or "qos_slots_met" not in rows[0]:
                continue
            runs.append(summarize_stream(rows, _seed_of(sdir), stream, w, tol))
    aggregate = {}
    for stream in sorted({r.stream for r in runs}):
        sel = [r for r in runs if r.stream == stream]
        agg = {}
        for metric in ("utility", "sum_rate", "qos_rate"):
            v = np.array([getattr(r, metric) for r in sel])
            agg[metric] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0, len(v))
        convs = [r.converged_episode for r in sel]
        agg["converged_runs"] = sum(c is not None for c in convs)
        aggregate[stream] = agg
    return Summary(runs, aggregate, ordering_flags(runs))


def ordering_flags(runs):
    """Relative margins for each pair in :data:`ORDERING`, per seed and overall."""
    by = {(r.seed, r.stream): r for r in runs}
    seeds = sorted({r.seed for r in runs})
    out = []
    for metric, better, worse, margin in ORDERING:
        per_seed = {}
        for s in seeds:
            a, b = by.get((s, better)), by.get((s, worse))
            if a is None or b is None:
                continue
            va, vb = getattr(a, metric), getattr(b, metric)
            per_seed[s] = (va - vb) / abs(vb) if vb else float("inf")
        if not per_seed:
            continue
        out.append(
            {
                "metric": metric,
                "better": better,
                "worse": worse,
                "required_margin": margin,
                "margin_by_seed": per_seed,
                "holds": all(m >= margin for m in per_seed.values()),
            }
        )
    return out


def write_summary(directory, summary):
    cols = [
        "seed",
        "stream",
        "episodes",
        "utility",
        "sum_rate",
        "qos_rate",
        "converged_episode",
        "steady_from",
    ]
    rows = [{c: getattr(r, c) for c in cols} for r in summary.runs]
    write_table(directory, "summary", cols, rows)
    payload = {
        "aggregate": {
            s: {k: list(v) if isinstance(v, tuple) else v for k, v in a.items()}
            for s, a in summary.aggregate.items()
        },
        "ordering": [
            {**f, "margin_by_seed": {int(k): float(v) for k, v in f["margin_by_seed"].items()}}
            for f in summary.ordering
        ],
        "non_converged": sorted(
            {f"seed_{r.seed}/{r.stream}" for r in summary.runs
             if r.stream.startswith("train") and r.converged_episode is None}
        ),
        "reference": summary.reference,
    }
    path = Path(directory) / "summary.yaml"
    path.write_text(yaml.safe_dump(payload, sort_keys=False))
    return path
