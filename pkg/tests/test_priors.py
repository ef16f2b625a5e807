import numpy as np
import pytest

from rebandit.priors import (
    HyperParams,
    PriorSpec,
    default_hyperparams,
    default_prior,
)


def test_default_prior_layout():
    prior = default_prior()
    assert prior.dim == 24
    # informative baseline entries
    assert prior.mean[0] == 2.12
    assert prior.mean[3] == -0.69
    np.testing.assert_array_equal(prior.mean[8:], np.zeros(16))
    # action-centering block reuses the advantage block exactly
    np.testing.assert_array_equal(prior.mean[16:24], prior.mean[8:16])
    diag = np.diag(prior.cov)
    np.testing.assert_array_equal(diag[16:24], diag[8:16])
    # diagonal, symmetric positive definite
    np.testing.assert_array_equal(prior.cov, np.diag(diag))
    assert np.linalg.eigvalsh(prior.cov).min() > 0


def test_default_prior_values():
    prior = default_prior()
    diag = np.diag(prior.cov)
    np.testing.assert_allclose(
        diag[:8], np.array([0.78, 0.38, 0.62, 0.98, 0.16, 0.16, 0.10, 0.10]) ** 2
    )
    np.testing.assert_allclose(
        diag[8:16], np.array([0.27, 0.33, 0.30, 0.32, 0.10, 0.10, 0.10, 0.10]) ** 2
    )


def test_default_hyperparams():
    hp = default_hyperparams()
    assert hp.noise_var == 0.85
    np.testing.assert_array_equal(hp.random_effects_cov, 0.01 * np.eye(24))


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorSpec(np.zeros(3), np.eye(4))
    bad = np.eye(3)
    bad[0, 1] = 0.5
    with pytest.raises(ValueError):
        PriorSpec(np.zeros(3), bad)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(noise_var=0.0, random_effects_cov=np.eye(2))
    bad = np.eye(2)
    bad[0, 1] = 0.3
    with pytest.raises(ValueError):
        HyperParams(noise_var=1.0, random_effects_cov=bad)
