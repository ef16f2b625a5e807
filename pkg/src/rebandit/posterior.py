"""Closed-form joint Gaussian posterior over all users' reward-model parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import blockcov
from .blockcov import NumericalError
from .priors import HyperParams, PriorSpec


@dataclass
class SufficientStats:
    """Per-user running statistics; additive under appending one observation.

    ``gram`` accumulates design outer products, ``cross`` design-times-reward,
    and ``sum_sq`` the squared engineered rewards.  Raw rewards are tracked
    elsewhere; everything entering the model update is engineered.
    """

    gram: np.ndarray
    cross: np.ndarray
    count: int = 0
    sum_sq: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "SufficientStats":
        return cls(gram=np.zeros((dim, dim)), cross=np.zeros(dim))

    def add(self, design_row: np.ndarray, reward: float) -> None:
        self.gram += np.outer(design_row, design_row)
        self.cross += design_row * reward
        self.count += 1
        self.sum_sq += float(reward) ** 2

    def copy(self) -> "SufficientStats":
        return SufficientStats(self.gram.copy(), self.cross.copy(), self.count, self.sum_sq)


def stack_stats(stats: list[SufficientStats]) -> tuple[np.ndarray, np.ndarray, int, float]:
    grams = np.stack([s.gram for s in stats])
    crosses = np.stack([s.cross for s in stats])
    n_obs = sum(s.count for s in stats)
    sum_sq = sum(s.sum_sq for s in stats)
    return grams, crosses, n_obs, sum_sq


@dataclass(frozen=True)
class PosteriorState:
    """Immutable posterior snapshot: stacked mean plus per-user covariance blocks.

    ``full_cov`` (the complete mp x mp matrix) is populated on request; the
    online loop only ever needs the per-user diagonal blocks.
    """

    mean: np.ndarray
    user_covs: np.ndarray
    full_cov: np.ndarray | None = field(default=None, compare=False)

    @property
    def n_users(self) -> int:
        return self.user_covs.shape[0]

    @property
    def dim(self) -> int:
        return self.user_covs.shape[1]

    def user_mean(self, i: int) -> np.ndarray:
        p = self.dim
        return self.mean[i * p : (i + 1) * p]

    def user_cov(self, i: int) -> np.ndarray:
        return self.user_covs[i]


def extract_user_posterior(post: PosteriorState, i: int) -> tuple[np.ndarray, np.ndarray]:
    """The i-th user's marginal posterior (mean, covariance); 0-indexed."""
    if not 0 <= i < post.n_users:
        raise IndexError(f"user index {i} out of range for {post.n_users} users")
    return post.user_mean(i), post.user_cov(i)


def sigma_tilde(prior: PriorSpec, hp: HyperParams, m: int) -> np.ndarray:
    """Dense joint prior covariance: shared blocks everywhere, random effects on the diagonal."""
    return blockcov.sigma_tilde_dense(prior.cov, hp.random_effects_cov, m)


def _prior_state(prior: PriorSpec, hp: HyperParams, m: int, want_full: bool) -> PosteriorState:
    block = prior.cov + hp.random_effects_cov
    return PosteriorState(
        mean=np.tile(prior.mean, m),
        user_covs=np.broadcast_to(block, (m, prior.dim, prior.dim)).copy(),
        full_cov=sigma_tilde(prior, hp, m) if want_full else None,
    )


def posterior_update(
    prior: PriorSpec,
    hp: HyperParams,
    stats: list[SufficientStats],
    method: str = "structured",
    want_full: bool = False,
) -> PosteriorState:
    """Joint posterior given every user's sufficient statistics.

    The joint prior covariance is rebuilt from the current hyperparameters on
    every call; snapshots never cache a stale one.  ``method`` selects the
    dense Cholesky reference path or the structured fast path.
    """
    m = len(stats)
    if m < 1:
        raise ValueError("need statistics for at least one user")
    grams, crosses, n_obs, sum_sq = stack_stats(stats)
    if n_obs == 0:
        # Reproduce the prior exactly (bitwise for the mean).
        return _prior_state(prior, hp, m, want_full)
    if method == "structured":
        sys = blockcov.BlockSystem(
            prior.mean, prior.cov, hp.random_effects_cov, hp.noise_var,
            grams, crosses, n_obs, sum_sq,
        )
        return PosteriorState(
            mean=sys.posterior_mean(),
            user_covs=sys.posterior_user_covs(),
            full_cov=sys.posterior_full_cov() if want_full else None,
        )
    if method != "dense":
        raise ValueError(f"unknown solve method {method!r}")

    p = prior.dim
    cov_joint = sigma_tilde(prior, hp, m)
    try:
        c = cho_factor(cov_joint, lower=True)
        prior_prec = cho_solve(c, np.eye(m * p))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"joint prior covariance not PD (cond={np.linalg.cond(cov_joint):.3e})"
        ) from exc
    y = 1.0 / hp.noise_var
    precision = prior_prec.copy()
    for i in range(m):
        precision[i * p : (i + 1) * p, i * p : (i + 1) * p] += y * grams[i]
    rhs = prior_prec @ np.tile(prior.mean, m) + y * crosses.reshape(-1)
    try:
        cg = cho_factor(0.5 * (precision + precision.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"posterior precision not PD (cond={np.linalg.cond(precision):.3e})"
        ) from exc
    full = cho_solve(cg, np.eye(m * p))
    full = 0.5 * (full + full.T)
    mean = cho_solve(cg, rhs)
    covs = np.stack([full[i * p : (i + 1) * p, i * p : (i + 1) * p] for i in range(m)])
    return PosteriorState(mean=mean, user_covs=covs, full_cov=full if want_full else None)
