import numpy as np
import pytest

from rebandit.posterior import SufficientStats
from rebandit.priors import HyperParams, PriorSpec


def random_prior(rng, p):
    a = rng.normal(size=(p, p))
    return PriorSpec(rng.normal(size=p), a @ a.T + p * np.eye(p))


def random_hyperparams(rng, p, diagonal=False):
    if diagonal:
        cov = np.diag(rng.uniform(0.1, 1.0, size=p))
    else:
        b = rng.normal(size=(p, p)) * 0.4
        cov = b @ b.T + 0.3 * np.eye(p)
    return HyperParams(noise_var=float(rng.uniform(0.3, 1.5)), random_effects_cov=cov)


def random_stats(rng, m, t, p):
    """Per-user stats plus the raw (design row, reward) lists behind them."""
    stats, rows, rewards = [], [], []
    for _ in range(m):
        s = SufficientStats.zeros(p)
        user_rows, user_rewards = [], []
        for _ in range(t):
            phi = rng.normal(size=p)
            r = float(rng.normal())
            s.add(phi, r)
            user_rows.append(phi)
            user_rewards.append(r)
        stats.append(s)
        rows.append(user_rows)
        rewards.append(user_rewards)
    return stats, rows, rewards


def dense_joint_prior_cov(prior, hp, m):
    """Independent block-by-block construction (test oracle; no kron, no library calls)."""
    p = prior.dim
    out = np.zeros((m * p, m * p))
    for i in range(m):
        for j in range(m):
            block = prior.cov.copy()
            if i == j:
                block = block + hp.random_effects_cov
            out[i * p : (i + 1) * p, j * p : (j + 1) * p] = block
    return out


def naive_posterior(prior, hp, rows, rewards):
    """Plain-inverse evaluation of the posterior formulas (test oracle)."""
    m = len(rows)
    p = prior.dim
    sig = dense_joint_prior_cov(prior, hp, m)
    x = np.linalg.inv(sig)
    gram = np.zeros((m * p, m * p))
    cross = np.zeros(m * p)
    for i in range(m):
        for phi, r in zip(rows[i], rewards[i]):
            gram[i * p : (i + 1) * p, i * p : (i + 1) * p] += np.outer(phi, phi)
            cross[i * p : (i + 1) * p] += phi * r
    y = 1.0 / hp.noise_var
    cov = np.linalg.inv(x + y * gram)
    mean = cov @ (x @ np.tile(prior.mean, m) + y * cross)
    return mean, cov


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)
