"""Desk-scale downlink scheduling lab: TTI environment, classical schedulers,
an actor-critic scheduler with one-pass and scalable policy networks, and
gene-aided Pareto explorers (NSGA-II and a Pareto list search)."""

from smartsched.config import ConfigError, EnvConfig, ExperimentConfig, GaConfig, TrainConfig
from smartsched.env import CellEnv, ContractViolation, Observation, StepOutcome
from smartsched.kpi import KpiWindow, RewardWeights, jain_index, step_reward

__version__ = "0.1.0"

__all__ = [
    "CellEnv",
    "ConfigError",
    "ContractViolation",
    "EnvConfig",
    "ExperimentConfig",
    "GaConfig",
    "KpiWindow",
    "Observation",
    "RewardWeights",
    "StepOutcome",
    "TrainConfig",
    "jain_index",
    "step_reward",
]
