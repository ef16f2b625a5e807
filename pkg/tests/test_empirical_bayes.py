import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import dense_joint_prior_cov, random_hyperparams, random_prior, random_stats

from rebandit.empirical_bayes import (
    CHOLESKY_FULL,
    MarginalObjectiveInputs,
    OptimizerConfig,
    marginal_ll_gradient,
    marginal_log_likelihood,
    update_hyperparams,
    _pack,
    _unpack,
)
from rebandit.features import StateTriple, design_vector
from rebandit.posterior import SufficientStats
from rebandit.priors import HyperParams, default_hyperparams, default_prior


def gaussian_marginal_oracle(prior, hp, rows, rewards):
    """Direct multivariate-normal log density of the stacked rewards (oracle)."""
    m, p = len(rows), prior.dim
    n = sum(len(r) for r in rows)
    design = np.zeros((n, m * p))
    rvec = np.zeros(n)
    k = 0
    for i in range(m):
        for phi, r in zip(rows[i], rewards[i]):
            design[k, i * p : (i + 1) * p] = phi
            rvec[k] = r
            k += 1
    joint = dense_joint_prior_cov(prior, hp, m)
    mean = design @ np.tile(prior.mean, m)
    cov = design @ joint @ design.T + hp.noise_var * np.eye(n)
    return 2.0 * multivariate_normal.logpdf(rvec, mean, cov) + n * np.log(2 * np.pi)


def test_zero_observations_objective_is_zero(rng):
    prior = random_prior(rng, 3)
    hp = random_hyperparams(rng, 3)
    stats = [SufficientStats.zeros(3) for _ in range(2)]
    inputs = MarginalObjectiveInputs.from_model(prior, hp, stats)
    assert marginal_log_likelihood(inputs) == 0.0


def test_matches_gaussian_marginal_oracle(rng):
    worst = 0.0
    for _ in range(40):
        m, t, p = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        prior = random_prior(rng, p)
        hp = random_hyperparams(rng, p)
        stats, rows, rewards = random_stats(rng, m, t, p)
        val = marginal_log_likelihood(MarginalObjectiveInputs.from_model(prior, hp, stats))
        worst = max(worst, abs(val - gaussian_marginal_oracle(prior, hp, rows, rewards)))
    assert worst < 1e-8


def test_zero_rewards_zero_mean_leaves_only_determinant_terms(rng):
    # With all rewards and the prior mean at zero, the quadratic terms vanish.
    p, m, t = 3, 2, 4
    prior = random_prior(rng, p)
    prior = type(prior)(np.zeros(p), prior.cov)
    hp = random_hyperparams(rng, p)
    stats = []
    grams = []
    for _ in range(m):
        s = SufficientStats.zeros(p)
        for _ in range(t):
            s.add(rng.normal(size=p), 0.0)
        stats.append(s)
        grams.append(s.gram)
    inputs = MarginalObjectiveInputs.from_model(prior, hp, stats)
    val = marginal_log_likelihood(inputs)
    x = inputs.prior_precision
    y = inputs.noise_precision
    expected = (
        np.linalg.slogdet(x)[1]
        - np.linalg.slogdet(x + y * inputs.gram)[1]
        + inputs.n_obs * np.log(y)
    )
    assert val == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("parameterization", ["diagonal-log", "cholesky-full"])
def test_gradient_matches_central_differences(rng, parameterization):
    cfg = OptimizerConfig(parameterization=parameterization)
    h = 1e-5
    for _ in range(10):
        m, t, p = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        prior = random_prior(rng, p)
        hp = random_hyperparams(rng, p, diagonal=(parameterization == "diagonal-log"))
        stats, _, _ = random_stats(rng, m, t, p)
        grad = marginal_ll_gradient(prior, stats, hp, cfg)
        theta = _pack(hp, cfg)
        fd = np.zeros_like(theta)
        for k in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            lp = marginal_log_likelihood(
                MarginalObjectiveInputs.from_model(prior, _unpack(tp, p, cfg), stats)
            )
            lm = marginal_log_likelihood(
                MarginalObjectiveInputs.from_model(prior, _unpack(tm, p, cfg), stats)
            )
            fd[k] = (lp - lm) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() <= 1e-4


def test_gradient_zero_without_observations(rng):
    p = 3
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p, diagonal=True)
    stats = [SufficientStats.zeros(p) for _ in range(2)]
    grad = marginal_ll_gradient(prior, stats, hp)
    np.testing.assert_allclose(grad, 0.0, atol=1e-9)


def test_update_without_observations_returns_init_unchanged(rng):
    prior = random_prior(rng, 3)
    hp = random_hyperparams(rng, 3, diagonal=True)
    stats = [SufficientStats.zeros(3)]
    fit = update_hyperparams(prior, stats, hp)
    assert fit.hyperparams is hp
    assert fit.converged


def test_ascent_is_monotone_and_never_worse_than_start(rng):
    for _ in range(5):
        p, m, t = 3, 2, 5
        prior = random_prior(rng, p)
        hp = random_hyperparams(rng, p, diagonal=True)
        stats, _, _ = random_stats(rng, m, t, p)
        start = marginal_log_likelihood(MarginalObjectiveInputs.from_model(prior, hp, stats))
        fit = update_hyperparams(prior, stats, hp, OptimizerConfig(max_iters=60))
        trace = np.array(fit.objective_trace)
        assert np.all(np.diff(trace) >= -1e-12)
        end = marginal_log_likelihood(
            MarginalObjectiveInputs.from_model(prior, fit.hyperparams, stats)
        )
        assert end >= start - 1e-10


def test_converged_fit_has_small_gradient(rng):
    p, m, t = 2, 2, 4
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p, diagonal=True)
    stats, _, _ = random_stats(rng, m, t, p)
    cfg = OptimizerConfig(max_iters=5000, step_size=0.2)
    fit = update_hyperparams(prior, stats, hp, cfg)
    if fit.converged:
        grad = marginal_ll_gradient(prior, stats, fit.hyperparams, cfg)
        assert np.max(np.abs(grad)) <= cfg.grad_tol * 1.001


def test_constraints_respected(rng):
    p, m, t = 3, 2, 5
    cfg = OptimizerConfig(eig_floor=1e-4, sigma_floor=1e-2, max_iters=80)
    prior = random_prior(rng, p)
    stats, _, _ = random_stats(rng, m, t, p)
    hp = HyperParams(0.5, np.diag([1e-3, 0.5, 0.2]))
    fit = update_hyperparams(prior, stats, hp, cfg)
    out = fit.hyperparams
    assert out.noise_var >= cfg.sigma_floor
    assert np.linalg.eigvalsh(out.random_effects_cov).min() >= cfg.eig_floor * (1 - 1e-12)
    assert np.abs(out.random_effects_cov - out.random_effects_cov.T).max() == 0.0


def test_cholesky_mode_keeps_full_covariance(rng):
    p, m, t = 3, 3, 6
    cfg = OptimizerConfig(parameterization=CHOLESKY_FULL, max_iters=40)
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p)
    stats, _, _ = random_stats(rng, m, t, p)
    fit = update_hyperparams(prior, stats, hp, cfg)
    cov = fit.hyperparams.random_effects_cov
    offdiag = cov - np.diag(np.diag(cov))
    assert np.linalg.eigvalsh(cov).min() > 0
    # full mode genuinely optimizes off-diagonal structure
    assert np.abs(offdiag).max() > 0


def test_deterministic(rng):
    p, m, t = 3, 2, 5
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p, diagonal=True)
    stats, _, _ = random_stats(rng, m, t, p)
    f1 = update_hyperparams(prior, stats, hp)
    f2 = update_hyperparams(prior, stats, hp)
    assert f1.hyperparams.noise_var == f2.hyperparams.noise_var
    assert np.array_equal(
        f1.hyperparams.random_effects_cov, f2.hyperparams.random_effects_cov
    )


def test_noise_variance_recovery_synthetic():
    prior = default_prior()
    true_noise = 0.85
    errors = []
    for seed in range(8):
        rng = np.random.default_rng(seed)
        theta_pop = prior.mean + np.linalg.cholesky(prior.cov) @ rng.normal(size=24)
        stats = []
        for _ in range(20):
            dev = 0.2 * rng.normal(size=24)
            theta_i = theta_pop + dev
            s = SufficientStats.zeros(24)
            for step in range(40):
                state = StateTriple(
                    int(rng.random() < 0.5), step % 2, int(rng.random() < 0.5)
                )
                pi = float(0.2 + 0.6 * rng.random())
                action = int(rng.random() < pi)
                phi = design_vector(state, action, pi)
                s.add(phi, float(phi @ theta_i + np.sqrt(true_noise) * rng.normal()))
            stats.append(s)
        fit = update_hyperparams(prior, stats, default_hyperparams())
        errors.append(abs(fit.hyperparams.noise_var - true_noise) / true_noise)
    assert float(np.mean(errors)) <= 0.25
