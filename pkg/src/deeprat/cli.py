"""Command-line entry point: ``deeprat <recipe> --config PATH --out DIR --seeds 0,1,2``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric abort.
Log verbosity comes from ``--log-level`` or the ``DEEPRAT_LOG_LEVEL``
environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError
from .recipes import EXIT_CONFIG, EXIT_NUMERIC, RECIPES, ExperimentRecipe, run_recipe

LOG_ENV = "DEEPRAT_LOG_LEVEL"


def parse_seeds(text):
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def build_parser():
    p = argparse.ArgumentParser(prog="deeprat", description=__doc__.splitlines()[0])
    p.add_argument("recipe", choices=RECIPES)
    p.add_argument("--config", default=None, help="config file (default: bundled paper.cfg)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=parse_seeds, default=(0,), help="e.g. 0,1,2 or 0-2")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--shock-period", type=int, default=None)
    p.add_argument("--k-inner", type=int, default=None)
    p.add_argument("--eval-episodes", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.add_argument("--log-level", default=None)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage, which is also our validation code
        return int(exc.code or 0)
    level = (args.log_level or os.environ.get(LOG_ENV) or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        recipe = ExperimentRecipe(
            name=args.recipe,
            config_path=args.config,
            out_dir=args.out,
            seeds=args.seeds,
            episodes=args.episodes,
            shock_period=args.shock_period,
            k_inner=args.k_inner,
            evaluation_episodes=args.eval_episodes,
            jobs=args.jobs,
        )
        code = run_recipe(recipe)
    except ConfigError as exc:
        print(f"deeprat: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code == EXIT_NUMERIC:
        print("deeprat: numeric abort, see status.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
