"""Linear algebra for joint covariances of the form I_m (x) C_u + J_m (x) C_s.

The stacked prior over m users' parameters couples a per-user block C_u with
a block C_s shared by every pair of users.  Adding per-user Gram blocks keeps
the posterior precision "block diagonal plus a shared rank-p correction", so
every solve and log-determinant reduces to m small (p x p) factorizations
instead of one dense (mp x mp) one.  The dense construction is kept as the
reference path; this module is the fast path and must agree with it.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class NumericalError(RuntimeError):
    """A symmetric factorization failed; usually ill-conditioned hyperparameters."""


def sigma_tilde_dense(shared_cov: np.ndarray, user_cov: np.ndarray, m: int) -> np.ndarray:
    """Dense (mp x mp) joint prior covariance: user blocks on the diagonal, shared everywhere."""
    if m < 1:
        raise ValueError("need at least one user")
    eye = np.eye(m)
    ones = np.ones((m, m))
    return np.kron(eye, user_cov) + np.kron(ones, shared_cov)


def _chol_inverse(mat: np.ndarray, label: str) -> tuple[np.ndarray, float]:
    """(inverse, logdet) of a symmetric PD matrix via Cholesky."""
    try:
        c, low = cho_factor(mat, lower=True)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(mat))
        raise NumericalError(f"{label} is not positive definite (cond={cond:.3e})") from exc
    inv = cho_solve((c, low), np.eye(mat.shape[0]))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return 0.5 * (inv + inv.T), logdet


class BlockSystem:
    """Posterior/marginal algebra for one (prior, hyperparameters, data) triple.

    Parameters are the shared prior covariance, its mean, the per-user
    random-effects covariance, the noise variance, and per-user sufficient
    statistics (Gram blocks, cross moments, counts, reward sum of squares).
    """

    def __init__(
        self,
        prior_mean: np.ndarray,
        prior_cov: np.ndarray,
        user_cov: np.ndarray,
        noise_var: float,
        grams: np.ndarray,
        crosses: np.ndarray,
        n_obs: int,
        sum_sq: float,
    ):
        self.mu = np.asarray(prior_mean, dtype=float)
        self.p = self.mu.size
        self.m = grams.shape[0]
        self.grams = np.asarray(grams, dtype=float)
        self.crosses = np.asarray(crosses, dtype=float)
        self.n_obs = int(n_obs)
        self.sum_sq = float(sum_sq)
        self.y = 1.0 / float(noise_var)

        p, m = self.p, self.m
        self.prec_u, self.logdet_user = _chol_inverse(user_cov, "random-effects covariance")
        pooled = user_cov + m * prior_cov
        self.pooled_inv, self.logdet_pooled = _chol_inverse(pooled, "pooled covariance")
        # Joint prior precision is I (x) prec_u + J (x) w_corr.
        self.w_corr = (self.pooled_inv - self.prec_u) / m
        self.w_vec = self.pooled_inv @ self.mu

        # Per-user posterior-precision blocks and the shared correction.
        self.d = self.prec_u[None, :, :] + self.y * self.grams
        try:
            self.d_inv = np.linalg.inv(self.d)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("per-user precision block is singular") from exc
        self.c_sum = self.d_inv.sum(axis=0)
        neg_w_inv, _ = _chol_inverse(self.prec_u - self.pooled_inv, "precision correction")
        w_inv = -m * neg_w_inv
        corr = w_inv + self.c_sum
        try:
            mmat = np.linalg.inv(corr)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("shared correction solve failed") from exc
        self.mmat = 0.5 * (mmat + mmat.T)

        # Right-hand side and posterior mean blocks.
        self.h = self.w_vec[None, :] + self.y * self.crosses          # (m, p)
        dh = np.einsum("ipq,iq->ip", self.d_inv, self.h)              # D_i^-1 h_i
        s = dh.sum(axis=0)
        self.v = np.einsum("ipq,iq->ip", self.d_inv, self.h - (self.mmat @ s)[None, :])

    # ---- posterior ----------------------------------------------------

    def posterior_mean(self) -> np.ndarray:
        return self.v.reshape(-1)

    def posterior_user_covs(self) -> np.ndarray:
        dm = np.einsum("ipq,qr->ipr", self.d_inv, self.mmat)
        covs = self.d_inv - np.einsum("ipq,iqr->ipr", dm, self.d_inv)
        return 0.5 * (covs + np.transpose(covs, (0, 2, 1)))

    def posterior_full_cov(self) -> np.ndarray:
        p, m = self.p, self.m
        out = np.zeros((m * p, m * p))
        dm = np.einsum("ipq,qr->ipr", self.d_inv, self.mmat)
        for i in range(m):
            for j in range(m):
                blk = -dm[i] @ self.d_inv[j]
                if i == j:
                    blk = blk + self.d_inv[i]
                out[i * p : (i + 1) * p, j * p : (j + 1) * p] = blk
        return 0.5 * (out + out.T)

    # ---- marginal likelihood ------------------------------------------

    def logdet_prior_precision(self) -> float:
        return -((self.m - 1) * self.logdet_user + self.logdet_pooled)

    def logdet_posterior_precision(self) -> float:
        sign, ld_corr = np.linalg.slogdet(
            np.eye(self.p) + self.w_corr @ self.c_sum
        )
        if sign <= 0:
            raise NumericalError("posterior precision lost positive definiteness")
        _, lds = np.linalg.slogdet(self.d)
        return float(lds.sum() + ld_corr)

    def log_marginal(self) -> float:
        """Marginal log likelihood of the observed rewards (additive constant dropped)."""
        if self.n_obs == 0:
            return 0.0
        quad = float(np.sum(self.h * self.v))
        mu_x_mu = self.m * float(self.mu @ self.w_vec)
        return (
            self.logdet_prior_precision()
            - self.logdet_posterior_precision()
            + self.n_obs * np.log(self.y)
            - self.y * self.sum_sq
            - mu_x_mu
            + quad
        )

    # ---- gradients -----------------------------------------------------

    def grad_user_cov(self) -> np.ndarray:
        """d log_marginal / d user_cov as a symmetric (p, p) matrix."""
        p = self.p
        prec_total = self.prec_u + self.w_corr      # diagonal block of the prior precision
        # Row sums and double sum of the posterior covariance blocks.
        i_minus_mc = np.eye(p) - self.mmat @ self.c_sum
        rowsum_total = self.c_sum @ i_minus_mc      # sum_i of row-sum blocks
        dm = np.einsum("ipq,qr->ipr", self.d_inv, self.mmat)
        sum_gii = self.c_sum - np.einsum("ipq,iqr->ipr", dm, self.d_inv).sum(axis=0)
        sum_xgx = (
            self.prec_u @ sum_gii @ self.prec_u
            + self.prec_u @ rowsum_total @ self.w_corr
            + self.w_corr @ rowsum_total.T @ self.prec_u
            + self.m * self.w_corr @ rowsum_total @ self.w_corr
        )
        # (Xv)_i = prec_u v_i + w_corr * (sum_j v_j); prior-mean image is w_vec for all i.
        v_sum = self.v.sum(axis=0)
        z = self.v @ self.prec_u.T + (self.w_corr @ v_sum)[None, :]
        resid = self.w_vec[None, :] - z
        outer = np.einsum("ip,iq->pq", resid, resid)
        grad = sum_xgx - self.m * prec_total + outer
        return 0.5 * (grad + grad.T)

    def grad_noise_precision(self) -> float:
        """d log_marginal / d (1/noise_var)."""
        dm = np.einsum("ipq,qr->ipr", self.d_inv, self.mmat)
        g_ii = self.d_inv - np.einsum("ipq,iqr->ipr", dm, self.d_inv)
        tr_ga = float(np.einsum("ipq,iqp->", g_ii, self.grams))
        quad_b = float(np.sum(self.crosses * self.v))
        av = np.einsum("ipq,iq->ip", self.grams, self.v)
        quad_a = float(np.sum(self.v * av))
        return -tr_ga + self.n_obs / self.y - self.sum_sq + 2.0 * quad_b - quad_a
