"""Comparison policies: fully pooled Bayesian linear regression and uniform random."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .blockcov import NumericalError
from .empirical_bayes import HyperFitResult, OptimizerConfig, update_noise_variance
from .priors import INITIAL_NOISE_VAR, PriorSpec


@dataclass
class BLRState:
    """Pooled posterior plus the pooled sufficient statistics that produced it."""

    mean: np.ndarray
    cov: np.ndarray
    noise_var: float
    gram: np.ndarray
    cross: np.ndarray
    count: int = 0
    sum_sq: float = 0.0

    @classmethod
    def initial(cls, prior: PriorSpec, noise_var: float = INITIAL_NOISE_VAR) -> "BLRState":
        p = prior.dim
        return cls(
            mean=prior.mean.copy(),
            cov=prior.cov.copy(),
            noise_var=noise_var,
            gram=np.zeros((p, p)),
            cross=np.zeros(p),
        )

    def add(self, design_row: np.ndarray, reward: float) -> None:
        self.gram += np.outer(design_row, design_row)
        self.cross += design_row * reward
        self.count += 1
        self.sum_sq += float(reward) ** 2


def blr_posterior_update(prior: PriorSpec, state: BLRState) -> BLRState:
    """Conjugate pooled update; rewards in the statistics are engineered rewards."""
    if state.count == 0:
        return replace(state, mean=prior.mean.copy(), cov=prior.cov.copy())
    y = 1.0 / state.noise_var
    prior_prec = np.linalg.inv(prior.cov)
    prior_prec = 0.5 * (prior_prec + prior_prec.T)
    precision = prior_prec + y * state.gram
    try:
        c = cho_factor(0.5 * (precision + precision.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"pooled posterior precision not PD (cond={np.linalg.cond(precision):.3e})"
        ) from exc
    cov = cho_solve(c, np.eye(prior.dim))
    mean = cho_solve(c, prior_prec @ prior.mean + y * state.cross)
    return replace(state, mean=mean, cov=0.5 * (cov + cov.T))


def blr_update_noise_variance(
    prior: PriorSpec, state: BLRState, cfg: OptimizerConfig | None = None
) -> HyperFitResult:
    """Noise variance by the same marginal-likelihood ascent, no random effects."""
    return update_noise_variance(
        prior, state.gram, state.cross, state.count, state.sum_sq, state.noise_var, cfg
    )


def random_policy() -> float:
    """Uniform-random comparator: send with probability one half, always."""
    return 0.5
