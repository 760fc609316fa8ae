"""Ornstein-Uhlenbeck parameter estimation: exact likelihood fits and an LSTM regressor."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .ou_core import (  # noqa: F401
    GridSpec,
    OUParams,
    SimConfig,
    Trajectory,
    TransitionMoments,
    analytic_moments,
    simulate_batch,
    simulate_exact,
    transition_log_density,
    transition_moments,
)
from .mle import EstimationResult, MleConfig, fit_mle, gmm_initialize, log_likelihood  # noqa: F401
