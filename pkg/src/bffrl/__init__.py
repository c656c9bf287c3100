"""Policy evaluation by Bellman residual minimisation from a single trajectory.

The borrow-from-the-future (BFF) estimators replace the unavailable second
next-state draw with ``s_m + (s_{m+2} - s_{m+1})``.
"""

__version__ = "0.1.0"

from .approximator import CosineMLP, TabularValues, init_params, load_checkpoint, save_checkpoint
from .env import (
    ContinuousEnvSpec,
    DiscreteEnvSpec,
    Trajectory,
    load_trajectory,
    ring_chain,
    save_trajectory,
    simulate,
    stationary_distribution,
)
from .errors import (
    BFFError,
    ConvergenceError,
    DivergenceError,
    EstimatorError,
    InsufficientSamplesError,
    SpecError,
)
from .residual import Estimator, TransitionWindow, WindowBatch, estimate_gradient, primal_dual_step
from .trainer import ErrorTrace, TrainConfig, build_reference, evaluate_error, make_batches, train

__all__ = [
    "BFFError", "ContinuousEnvSpec", "ConvergenceError", "CosineMLP", "DiscreteEnvSpec",
    "DivergenceError", "ErrorTrace", "Estimator", "EstimatorError", "InsufficientSamplesError",
    "SpecError", "TabularValues", "TrainConfig", "Trajectory", "TransitionWindow", "WindowBatch",
    "build_reference", "estimate_gradient", "evaluate_error", "init_params", "load_checkpoint",
    "load_trajectory", "make_batches", "primal_dual_step", "ring_chain", "save_checkpoint",
    "save_trajectory", "simulate", "stationary_distribution", "train",
]
