"""Entropy-smoothed Bellman residual minimization with a fitted dual (primal-dual actor-critic).

Tabular oracles, parametric families, the saddle objective and its gradient
estimators, mirror-descent prox steps, the replay training loop and a CLI.
"""

from .bellman import (
    smoothed_bellman_apply,
    smoothed_optimal_policy,
    solve_fixed_point,
)
from .config import SdecConfig, config_from_dict, load_config
from .errors import SdecError, ValidationError
from .mdp import make_benchmark_env, make_tabular_mdp
from .train import TrainResult, evaluate_policy, sdec_train

__version__ = "0.1.0"

__all__ = [
    "SdecConfig",
    "SdecError",
    "TrainResult",
    "ValidationError",
    "config_from_dict",
    "evaluate_policy",
    "load_config",
    "make_benchmark_env",
    "make_tabular_mdp",
    "sdec_train",
    "smoothed_bellman_apply",
    "smoothed_optimal_policy",
    "solve_fixed_point",
]
