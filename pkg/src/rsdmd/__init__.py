"""Reinforced SDMD: agents that choose where to start SDE trajectories so that
the stochastic Koopman estimate built from them is spectrally consistent."""
from .config import ExperimentConfig, parse_config, resolve_config
from .dictionary import (HermiteDictionary, MonomialDictionary, RbfDictionary, TrainableDictionary,
                         make_dictionary)
from .env import ActionGrid, CellRewardEnv, KoopmanEnv, RewardConfig, compute_reward, kde_density
from .exceptions import ConfigError, RsdmdError
from .experiment import export_eigenfunction_grid, run_experiment
from .regret import RegretExperiment, run_regret_experiment, validate_assumption_gap
from .sdmd import SDMD, KoopmanEstimate, estimate_koopman, spectral_consistency
from .systems import SdeSystem, SnapshotData, builtin_system, simulate_trajectory

__version__ = "0.1.0"

__all__ = [
    "SDMD", "ActionGrid", "CellRewardEnv", "ConfigError", "ExperimentConfig", "HermiteDictionary",
    "KoopmanEnv", "KoopmanEstimate", "MonomialDictionary", "RbfDictionary", "RegretExperiment",
    "RewardConfig", "RsdmdError", "SdeSystem", "SnapshotData", "TrainableDictionary", "builtin_system",
    "compute_reward", "estimate_koopman", "export_eigenfunction_grid", "kde_density", "make_dictionary",
    "parse_config", "resolve_config", "run_experiment", "run_regret_experiment", "simulate_trajectory",
    "spectral_consistency", "validate_assumption_gap",
]
