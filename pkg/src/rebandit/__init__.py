"""Adaptive-pooling Thompson-sampling bandit with simulation testbed and service."""

__version__ = "0.1.0"

from .features import PARAM_DIM, StateTriple, context_features, design_vector
from .policy import SmoothingParams, action_probability, rho, sample_action
from .posterior import PosteriorState, SufficientStats, extract_user_posterior, posterior_update
from .priors import HyperParams, PriorSpec, default_hyperparams, default_prior

__all__ = [
    "PARAM_DIM",
    "StateTriple",
    "context_features",
    "design_vector",
    "SmoothingParams",
    "action_probability",
    "rho",
    "sample_action",
    "PosteriorState",
    "SufficientStats",
    "extract_user_posterior",
    "posterior_update",
    "HyperParams",
    "PriorSpec",
    "default_hyperparams",
    "default_prior",
    "__version__",
]
