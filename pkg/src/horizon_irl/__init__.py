"""Horizon-aware inverse reinforcement learning for longitudinal driving."""

from .features import DriverConstants, DrivingCondition, NormalizationTable
from .learner import LearnerConfig, learn_all
from .distribution import LearnedDriverModel, load_model, save_model
from .planner import EgoState, PlannerConfig, rollout_scenario
from .trajectory import LeaderFollowerLog, load_log, load_log_file

__all__ = [
    "DriverConstants", "DrivingCondition", "NormalizationTable", "LearnerConfig",
    "learn_all", "LearnedDriverModel", "load_model", "save_model", "EgoState",
    "PlannerConfig", "rollout_scenario", "LeaderFollowerLog", "load_log", "load_log_file",
]
__version__ = "0.1.0"
