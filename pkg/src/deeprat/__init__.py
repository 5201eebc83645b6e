"""Hierarchical RAT assignment and power allocation for multi-RAT networks.

An edge-server Q-learner picks the set of RATs serving each device, and one
actor-critic agent per RAT splits that RAT's power budget.
"""

from .config import ConfigError, TrainConfig, load_config, load_paper_config
from .orchestrator import EpisodeRecord, Trainer, detect_convergence, evaluate, train

__all__ = [
    "ConfigError",
    "EpisodeRecord",
    "TrainConfig",
    "Trainer",
    "detect_convergence",
    "evaluate",
    "load_config",
    "load_paper_config",
    "train",
]
__version__ = "0.1.0"
