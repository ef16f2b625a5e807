"""Online agents: the decision/update cycle shared by the trial runner and service."""

from __future__ import annotations

import numpy as np

from . import baselines, empirical_bayes, policy, posterior
from .empirical_bayes import HyperFitResult, OptimizerConfig
from .features import StateTriple, advantage_slice, context_features, design_vector
from .policy import RewardEngineering, SmoothingParams
from .priors import HyperParams, PriorSpec


class MixedEffectsAgent:
    """Adaptive-pooling agent: per-user random effects around shared parameters."""

    name = "rebandit"

    def __init__(
        self,
        prior: PriorSpec,
        hyperparams: HyperParams,
        n_users: int,
        smoothing: SmoothingParams | None = None,
        penalty_weight: float = 0.2,
        optimizer: OptimizerConfig | None = None,
        solver: str = "structured",
        gh_nodes: int = policy.GH_NODES_DEFAULT,
    ):
        self.prior = prior
        self.hyperparams = hyperparams
        self.n_users = n_users
        self.smoothing = smoothing or SmoothingParams()
        self.optimizer = optimizer or OptimizerConfig()
        self.solver = solver
        self.gh_nodes = gh_nodes
        self.stats = [posterior.SufficientStats.zeros(prior.dim) for _ in range(n_users)]
        self.rewards = RewardEngineering(penalty_weight)
        self.snapshot = posterior.posterior_update(prior, hyperparams, self.stats, solver)
        self.last_fit: HyperFitResult | None = None
        self._adv = advantage_slice(prior.dim)

    def action_probability(self, user: int, state: StateTriple) -> float:
        mu = self.snapshot.user_mean(user)
        cov = self.snapshot.user_cov(user)
        return policy.action_probability(
            mu[self._adv],
            cov[self._adv, self._adv],
            context_features(state),
            self.smoothing,
            self.gh_nodes,
        )

    def observe(self, user: int, state: StateTriple, pi: float, action: int, raw: int) -> float:
        engineered = self.rewards.engineer(user, raw, action)
        self.rewards.record(user, raw)
        self.stats[user].add(design_vector(state, action, pi), engineered)
        return engineered

    def update_posterior(self) -> None:
        self.snapshot = posterior.posterior_update(
            self.prior, self.hyperparams, self.stats, self.solver
        )

    def update_hyperparams(self) -> HyperFitResult:
        fit = empirical_bayes.update_hyperparams(
            self.prior, self.stats, self.hyperparams, self.optimizer
        )
        self.hyperparams = fit.hyperparams
        self.last_fit = fit
        return fit


class PooledAgent:
    """Fully pooled comparator: one shared model, same smoothing and rewards."""

    name = "blr"

    def __init__(
        self,
        prior: PriorSpec,
        noise_var: float,
        n_users: int,
        smoothing: SmoothingParams | None = None,
        penalty_weight: float = 0.2,
        optimizer: OptimizerConfig | None = None,
        gh_nodes: int = policy.GH_NODES_DEFAULT,
    ):
        self.prior = prior
        self.n_users = n_users
        self.smoothing = smoothing or SmoothingParams()
        self.optimizer = optimizer or OptimizerConfig()
        self.gh_nodes = gh_nodes
        self.state = baselines.BLRState.initial(prior, noise_var)
        self.rewards = RewardEngineering(penalty_weight)
        self.last_fit: HyperFitResult | None = None
        self._adv = advantage_slice(prior.dim)

    def action_probability(self, user: int, state: StateTriple) -> float:
        return policy.action_probability(
            self.state.mean[self._adv],
            self.state.cov[self._adv, self._adv],
            context_features(state),
            self.smoothing,
            self.gh_nodes,
        )

    def observe(self, user: int, state: StateTriple, pi: float, action: int, raw: int) -> float:
        engineered = self.rewards.engineer(user, raw, action)
        self.rewards.record(user, raw)
        self.state.add(design_vector(state, action, pi), engineered)
        return engineered

    def update_posterior(self) -> None:
        self.state = baselines.blr_posterior_update(self.prior, self.state)

    def update_hyperparams(self) -> HyperFitResult:
        fit = baselines.blr_update_noise_variance(self.prior, self.state, self.optimizer)
        self.state.noise_var = fit.hyperparams.noise_var
        self.last_fit = fit
        return fit


class RandomAgent:
    """Send with probability one half; keeps reward statistics for comparable logs."""

    name = "random"

    def __init__(self, n_users: int, penalty_weight: float = 0.2, **_unused):
        self.n_users = n_users
        self.rewards = RewardEngineering(penalty_weight)
        self.last_fit = None

    def action_probability(self, user: int, state: StateTriple) -> float:
        return baselines.random_policy()

    def observe(self, user: int, state: StateTriple, pi: float, action: int, raw: int) -> float:
        engineered = self.rewards.engineer(user, raw, action)
        self.rewards.record(user, raw)
        return engineered

    def update_posterior(self) -> None:
        pass

    def update_hyperparams(self) -> None:
        return None


def make_agent(
    algorithm: str,
    n_users: int,
    prior: PriorSpec,
    hyperparams: HyperParams,
    smoothing: SmoothingParams,
    penalty_weight: float,
    optimizer: OptimizerConfig,
    solver: str = "structured",
    gh_nodes: int = policy.GH_NODES_DEFAULT,
):
    if algorithm == "rebandit":
        return MixedEffectsAgent(
            prior, hyperparams, n_users, smoothing, penalty_weight, optimizer, solver, gh_nodes
        )
    if algorithm == "blr":
        return PooledAgent(
            prior, hyperparams.noise_var, n_users, smoothing, penalty_weight, optimizer, gh_nodes
        )
    if algorithm == "random":
        return RandomAgent(n_users, penalty_weight)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected rebandit, blr, or random")
