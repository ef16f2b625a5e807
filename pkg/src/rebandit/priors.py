"""Gaussian prior over the population parameters and the learnable hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import BASE_DIM, PARAM_DIM

# Informative prior for the 8 baseline coordinates, in the feature order
# [1, x1, x2, x3, x1x2, x2x3, x1x3, x1x2x3].
BASELINE_PRIOR_MEAN = np.array([2.12, 0.0, 0.0, -0.69, 0.0, 0.0, 0.0, 0.0])
BASELINE_PRIOR_SD = np.array([0.78, 0.38, 0.62, 0.98, 0.16, 0.16, 0.10, 0.10])

# Advantage coordinates; the action-centering block reuses these exactly.
ADVANTAGE_PRIOR_MEAN = np.zeros(8)
ADVANTAGE_PRIOR_SD = np.array([0.27, 0.33, 0.30, 0.32, 0.10, 0.10, 0.10, 0.10])

INITIAL_NOISE_VAR = 0.85
INITIAL_RANDOM_EFFECTS_VAR = 0.01  # (0.1)^2 on every coordinate, no covariance


@dataclass(frozen=True)
class PriorSpec:
    """Normal prior N(mean, cov) on the population-level parameter vector."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("prior covariance shape does not match mean")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("prior covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class HyperParams:
    """Noise variance and random-effects covariance, both kept away from zero."""

    noise_var: float
    random_effects_cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.random_effects_cov, dtype=float)
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("random-effects covariance must be symmetric")
        object.__setattr__(self, "random_effects_cov", cov)

    @property
    def dim(self) -> int:
        return self.random_effects_cov.shape[0]


def default_prior() -> PriorSpec:
    """24-dim prior: informative baseline block, advantage block reused for centering."""
    mean = np.concatenate([BASELINE_PRIOR_MEAN, ADVANTAGE_PRIOR_MEAN, ADVANTAGE_PRIOR_MEAN])
    sd = np.concatenate([BASELINE_PRIOR_SD, ADVANTAGE_PRIOR_SD, ADVANTAGE_PRIOR_SD])
    assert mean.size == PARAM_DIM and sd.size == 3 * BASE_DIM
    return PriorSpec(mean=mean, cov=np.diag(sd**2))


def default_hyperparams(dim: int = PARAM_DIM) -> HyperParams:
    return HyperParams(
        noise_var=INITIAL_NOISE_VAR,
        random_effects_cov=INITIAL_RANDOM_EFFECTS_VAR * np.eye(dim),
    )
