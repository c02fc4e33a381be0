"""Continual learning with embedding regularization and classic baselines."""
from .harness import ExperimentConfig, RunReport, load_config, run_experiment
from .memory import MemoryEntry, ReplayMemory
from .metrics import RMatrix, accuracy, backward_transfer, positive_bwt, remembering
from .model import HeadPolicy, Network
from .strategies import StrategyConfig, make_strategy, train_task
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "HeadPolicy",
    "MemoryEntry",
    "Network",
    "RMatrix",
    "ReplayMemory",
    "RunReport",
    "StrategyConfig",
    "Tensor",
    "accuracy",
    "backward_transfer",
    "load_config",
    "make_strategy",
    "positive_bwt",
    "remembering",
    "run_experiment",
    "train_task",
]
