import numpy as np
import pytest

from conftest import dense_joint_prior_cov, naive_posterior, random_hyperparams, random_prior, random_stats

from rebandit.blockcov import NumericalError
from rebandit.posterior import (
    PosteriorState,
    SufficientStats,
    extract_user_posterior,
    posterior_update,
    sigma_tilde,
)
from rebandit.priors import HyperParams, PriorSpec


def test_sigma_tilde_single_user(rng):
    prior = random_prior(rng, 3)
    hp = random_hyperparams(rng, 3)
    np.testing.assert_allclose(
        sigma_tilde(prior, hp, 1), prior.cov + hp.random_effects_cov, atol=1e-14
    )


def test_sigma_tilde_two_users_identity_blocks():
    p = 24
    prior = PriorSpec(np.zeros(p), np.eye(p))
    hp = HyperParams(1.0, 2.0 * np.eye(p))
    full = sigma_tilde(prior, hp, 2)
    np.testing.assert_array_equal(full[:p, :p], 3.0 * np.eye(p))
    np.testing.assert_array_equal(full[p:, p:], 3.0 * np.eye(p))
    np.testing.assert_array_equal(full[:p, p:], np.eye(p))
    np.testing.assert_array_equal(full[p:, :p], np.eye(p))


def test_sigma_tilde_positive_definite(rng):
    for m in (1, 2, 5):
        prior = random_prior(rng, 4)
        hp = random_hyperparams(rng, 4)
        vals = np.linalg.eigvalsh(sigma_tilde(prior, hp, m))
        assert vals.min() > 0


def test_zero_observations_reproduce_prior_exactly(rng):
    p, m = 5, 3
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p)
    stats = [SufficientStats.zeros(p) for _ in range(m)]
    for method in ("dense", "structured"):
        post = posterior_update(prior, hp, stats, method=method, want_full=True)
        # mean is reproduced bitwise, covariance to strictly better than 1e-12
        assert np.array_equal(post.mean, np.tile(prior.mean, m))
        np.testing.assert_allclose(
            post.full_cov, dense_joint_prior_cov(prior, hp, m), atol=1e-12, rtol=0
        )
        for i in range(m):
            np.testing.assert_allclose(
                post.user_cov(i), prior.cov + hp.random_effects_cov, atol=1e-12, rtol=0
            )


def test_single_observation_scalar_conjugate_oracle(rng):
    # One observation on the first coordinate of a single user, everything else
    # diagonal: the first coordinate follows the 1-D normal-normal update.
    p = 4
    prior = PriorSpec(rng.normal(size=p), np.diag(rng.uniform(0.5, 2.0, size=p)))
    hp = HyperParams(0.7, np.diag(rng.uniform(0.1, 0.5, size=p)))
    stats = [SufficientStats.zeros(p)]
    phi = np.zeros(p)
    phi[0] = 1.0
    reward = 1.3
    stats[0].add(phi, reward)
    post = posterior_update(prior, hp, stats, method="dense")

    v0 = prior.cov[0, 0] + hp.random_effects_cov[0, 0]
    mu0 = prior.mean[0]
    prec = 1.0 / v0 + 1.0 / hp.noise_var
    expected_var = 1.0 / prec
    expected_mean = expected_var * (mu0 / v0 + reward / hp.noise_var)
    assert post.user_mean(0)[0] == pytest.approx(expected_mean, abs=1e-12)
    assert post.user_cov(0)[0, 0] == pytest.approx(expected_var, abs=1e-12)
    # untouched coordinates keep their prior marginals
    assert post.user_mean(0)[1] == pytest.approx(prior.mean[1], abs=1e-12)


@pytest.mark.parametrize("method", ["dense", "structured"])
def test_posterior_matches_naive_oracle(rng, method):
    for _ in range(20):
        m = int(rng.integers(1, 4))
        t = int(rng.integers(1, 6))
        p = int(rng.integers(2, 5))
        prior = random_prior(rng, p)
        hp = random_hyperparams(rng, p)
        stats, rows, rewards = random_stats(rng, m, t, p)
        mean_o, cov_o = naive_posterior(prior, hp, rows, rewards)
        post = posterior_update(prior, hp, stats, method=method, want_full=True)
        np.testing.assert_allclose(post.mean, mean_o, atol=1e-8, rtol=0)
        np.testing.assert_allclose(post.full_cov, cov_o, atol=1e-8, rtol=0)


def test_structured_agrees_with_dense_moderate_size(rng):
    p, m, t = 24, 12, 7
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p, diagonal=True)
    stats, _, _ = random_stats(rng, m, t, p)
    dense = posterior_update(prior, hp, stats, method="dense", want_full=True)
    fast = posterior_update(prior, hp, stats, method="structured", want_full=True)
    np.testing.assert_allclose(fast.mean, dense.mean, atol=1e-8, rtol=0)
    np.testing.assert_allclose(fast.full_cov, dense.full_cov, atol=1e-8, rtol=0)


def test_posterior_symmetric_positive_definite_along_a_trial(rng):
    p, m = 6, 3
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p)
    stats = [SufficientStats.zeros(p) for _ in range(m)]
    for step in range(12):
        for i in range(m):
            stats[i].add(rng.normal(size=p), float(rng.normal()))
        post = posterior_update(prior, hp, stats, method="structured", want_full=True)
        asym = np.abs(post.full_cov - post.full_cov.T).max()
        assert asym < 1e-12
        assert np.linalg.eigvalsh(post.full_cov).min() > 0


def test_stats_order_independent_exact():
    # Dyadic design entries and rewards make every accumulation exact, so a
    # permuted observation order reproduces the statistics bit for bit.
    rng = np.random.default_rng(5)
    p = 6
    obs = []
    for _ in range(40):
        phi = rng.choice([0.0, 0.25, 0.5, 1.0], size=p)
        obs.append((phi, float(rng.integers(0, 4))))
    a = SufficientStats.zeros(p)
    for phi, r in obs:
        a.add(phi, r)
    b = SufficientStats.zeros(p)
    for idx in rng.permutation(len(obs)):
        phi, r = obs[idx]
        b.add(phi, r)
    assert np.array_equal(a.gram, b.gram)
    assert np.array_equal(a.cross, b.cross)
    assert a.count == b.count and a.sum_sq == b.sum_sq


def test_extract_user_posterior(rng):
    p, m = 4, 3
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p)
    stats, rows, rewards = random_stats(rng, m, 3, p)
    post = posterior_update(prior, hp, stats, method="dense", want_full=True)
    mean_o, cov_o = naive_posterior(prior, hp, rows, rewards)
    for i in range(m):
        mu_i, cov_i = extract_user_posterior(post, i)
        np.testing.assert_allclose(mu_i, mean_o[i * p : (i + 1) * p], atol=1e-8)
        np.testing.assert_allclose(
            cov_i, cov_o[i * p : (i + 1) * p, i * p : (i + 1) * p], atol=1e-8
        )
        assert np.abs(cov_i - cov_i.T).max() < 1e-12
        assert np.linalg.eigvalsh(cov_i).min() > 0
    with pytest.raises(IndexError):
        extract_user_posterior(post, m)
    with pytest.raises(IndexError):
        extract_user_posterior(post, -1)


def test_user_blocks_differ_under_asymmetric_data(rng):
    p = 3
    prior = random_prior(rng, p)
    hp = random_hyperparams(rng, p)
    stats = [SufficientStats.zeros(p), SufficientStats.zeros(p)]
    for _ in range(6):
        stats[0].add(rng.normal(size=p), float(rng.normal()))
    stats[1].add(rng.normal(size=p) * 0.1, 0.2)
    post = posterior_update(prior, hp, stats, method="structured")
    assert not np.allclose(post.user_mean(0), post.user_mean(1))
    assert not np.allclose(post.user_cov(0), post.user_cov(1))


def test_tiny_random_effects_reduce_to_pooled_model(rng):
    # With the random-effects covariance collapsed to eps * I every user's
    # posterior mean approaches the pooled conjugate update whose prior
    # covariance is (shared + random-effects) on all data combined.
    p, m, t = 4, 3, 5
    prior = random_prior(rng, p)
    eps = 1e-8
    hp = HyperParams(0.8, eps * np.eye(p))
    stats, rows, rewards = random_stats(rng, m, t, p)
    post = posterior_update(prior, hp, stats, method="structured")

    pooled_cov = prior.cov + hp.random_effects_cov
    gram = sum(s.gram for s in stats)
    cross = sum(s.cross for s in stats)
    y = 1.0 / hp.noise_var
    cov_b = np.linalg.inv(np.linalg.inv(pooled_cov) + y * gram)
    mean_b = cov_b @ (np.linalg.solve(pooled_cov, prior.mean) + y * cross)
    for i in range(m):
        np.testing.assert_allclose(post.user_mean(i), mean_b, atol=1e-4, rtol=0)


def test_numerical_error_reports_conditioning(rng):
    p = 3
    prior = PriorSpec(np.zeros(p), np.eye(p))
    bad = HyperParams(1.0, np.diag([1.0, 1.0, -0.5]))  # indefinite: must be rejected
    stats = [SufficientStats.zeros(p)]
    stats[0].add(np.ones(p), 1.0)
    with pytest.raises(NumericalError):
        posterior_update(prior, bad, stats, method="structured")
