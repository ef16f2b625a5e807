"""Hyperparameter estimation by maximizing the reward marginal likelihood.

The noise variance and the random-effects covariance are fit by projected
gradient ascent with a backtracking line search; the objective is the log
marginal likelihood of the observed (engineered) rewards with the model
parameters integrated out, up to an additive constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .blockcov import BlockSystem, NumericalError
from .posterior import SufficientStats, stack_stats
from .priors import HyperParams, PriorSpec

DIAGONAL_LOG = "diagonal-log"
CHOLESKY_FULL = "cholesky-full"


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 0.05
    max_iters: int = 200
    grad_tol: float = 1e-5
    eig_floor: float = 1e-6
    sigma_floor: float = 1e-4
    max_backtracks: int = 20
    parameterization: str = DIAGONAL_LOG

    def __post_init__(self):
        if self.parameterization not in (DIAGONAL_LOG, CHOLESKY_FULL):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        for name in ("step_size", "max_iters", "grad_tol", "eig_floor", "sigma_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MarginalObjectiveInputs:
    """Dense inputs of the marginal-likelihood formula (reference path).

    ``prior_precision`` is the inverse joint prior covariance over all users,
    ``noise_precision`` the inverse noise variance, ``gram`` the block-diagonal
    stacked Gram matrix, ``cross`` and ``prior_mean`` stacked vectors.
    """

    prior_precision: np.ndarray
    noise_precision: float
    gram: np.ndarray
    cross: np.ndarray
    prior_mean: np.ndarray
    sum_sq: float
    n_obs: int

    @classmethod
    def from_model(
        cls, prior: PriorSpec, hp: HyperParams, stats: list[SufficientStats]
    ) -> "MarginalObjectiveInputs":
        from .posterior import sigma_tilde

        m, p = len(stats), prior.dim
        cov_joint = sigma_tilde(prior, hp, m)
        c = cho_factor(cov_joint, lower=True)
        x = cho_solve(c, np.eye(m * p))
        gram = np.zeros((m * p, m * p))
        for i, s in enumerate(stats):
            gram[i * p : (i + 1) * p, i * p : (i + 1) * p] = s.gram
        grams, crosses, n_obs, sum_sq = stack_stats(stats)
        del grams
        return cls(
            prior_precision=0.5 * (x + x.T),
            noise_precision=1.0 / hp.noise_var,
            gram=gram,
            cross=crosses.reshape(-1),
            prior_mean=np.tile(prior.mean, m),
            sum_sq=sum_sq,
            n_obs=n_obs,
        )


def marginal_log_likelihood(inputs: MarginalObjectiveInputs) -> float:
    """Reward marginal log likelihood, additive constant dropped.

    Equals twice the exact Gaussian marginal log density of the stacked
    rewards plus ``n_obs * log(2 pi)``.
    """
    if inputs.n_obs == 0:
        return 0.0
    x, y = inputs.prior_precision, inputs.noise_precision
    mu = inputs.prior_mean
    try:
        cx = cho_factor(x, lower=True)
        logdet_x = 2.0 * float(np.sum(np.log(np.diag(cx[0]))))
        g = x + y * inputs.gram
        cg = cho_factor(0.5 * (g + g.T), lower=True)
        logdet_g = 2.0 * float(np.sum(np.log(np.diag(cg[0]))))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("marginal objective needs PD precision matrices") from exc
    h = x @ mu + y * inputs.cross
    quad = float(h @ cho_solve(cg, h))
    return (
        logdet_x
        - logdet_g
        + inputs.n_obs * np.log(y)
        - y * inputs.sum_sq
        - float(mu @ x @ mu)
        + quad
    )


@dataclass
class HyperFitResult:
    hyperparams: HyperParams
    converged: bool
    n_iters: int
    objective_trace: list[float] = field(default_factory=list)
    message: str = ""


# ---- parameterizations -------------------------------------------------


def _pack(hp: HyperParams, cfg: OptimizerConfig) -> np.ndarray:
    cov = hp.random_effects_cov
    if cfg.parameterization == DIAGONAL_LOG:
        return np.concatenate([np.log(np.diag(cov)), [np.log(hp.noise_var)]])
    chol = np.linalg.cholesky(_floor_cov(cov, cfg.eig_floor))
    idx = np.tril_indices(cov.shape[0])
    return np.concatenate([chol[idx], [np.log(hp.noise_var)]])


def _unpack(theta: np.ndarray, dim: int, cfg: OptimizerConfig) -> HyperParams:
    if cfg.parameterization == DIAGONAL_LOG:
        cov = np.diag(np.exp(theta[:-1]))
    else:
        chol = np.zeros((dim, dim))
        chol[np.tril_indices(dim)] = theta[:-1]
        cov = chol @ chol.T
    return HyperParams(noise_var=float(np.exp(theta[-1])), random_effects_cov=cov)


def _floor_cov(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def _project(theta: np.ndarray, dim: int, cfg: OptimizerConfig) -> np.ndarray:
    out = theta.copy()
    out[-1] = max(out[-1], np.log(cfg.sigma_floor))
    if cfg.parameterization == DIAGONAL_LOG:
        out[:-1] = np.maximum(out[:-1], np.log(cfg.eig_floor))
        return out
    chol = np.zeros((dim, dim))
    idx = np.tril_indices(dim)
    chol[idx] = out[:-1]
    cov = chol @ chol.T
    vals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if vals.min() < cfg.eig_floor:
        out[:-1] = np.linalg.cholesky(_floor_cov(cov, cfg.eig_floor))[idx]
    return out


def _value_and_grad(
    prior: PriorSpec,
    grams: np.ndarray,
    crosses: np.ndarray,
    n_obs: int,
    sum_sq: float,
    theta: np.ndarray,
    cfg: OptimizerConfig,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    hp = _unpack(theta, prior.dim, cfg)
    sys = BlockSystem(
        prior.mean, prior.cov, hp.random_effects_cov, hp.noise_var,
        grams, crosses, n_obs, sum_sq,
    )
    value = sys.log_marginal()
    if not want_grad:
        return value, None
    gcov = sys.grad_user_cov()
    dl_dy = sys.grad_noise_precision()
    dl_dlogsig = -sys.y * dl_dy
    if cfg.parameterization == DIAGONAL_LOG:
        grad = np.concatenate([np.diag(gcov) * np.exp(theta[:-1]), [dl_dlogsig]])
    else:
        dim = prior.dim
        chol = np.zeros((dim, dim))
        idx = np.tril_indices(dim)
        chol[idx] = theta[:-1]
        grad_l = 2.0 * (gcov @ chol)
        grad = np.concatenate([grad_l[idx], [dl_dlogsig]])
    return value, grad


def marginal_ll_gradient(
    prior: PriorSpec,
    stats: list[SufficientStats],
    hp: HyperParams,
    cfg: OptimizerConfig | None = None,
) -> np.ndarray:
    """Objective gradient in the configured hyperparameter coordinates."""
    cfg = cfg or OptimizerConfig()
    grams, crosses, n_obs, sum_sq = stack_stats(stats)
    theta = _pack(hp, cfg)
    _, grad = _value_and_grad(prior, grams, crosses, n_obs, sum_sq, theta, cfg, True)
    return grad


def update_hyperparams(
    prior: PriorSpec,
    stats: list[SufficientStats],
    hp_init: HyperParams,
    cfg: OptimizerConfig | None = None,
) -> HyperFitResult:
    """Monotone projected gradient ascent, warm-started from ``hp_init``.

    Never raises on non-convergence: the best iterate found is returned with
    ``converged=False`` so an online run can always continue.
    """
    cfg = cfg or OptimizerConfig()
    grams, crosses, n_obs, sum_sq = stack_stats(stats)
    if n_obs == 0:
        return HyperFitResult(hp_init, True, 0, [], "no observations; objective constant")

    dim = prior.dim
    theta = _project(_pack(hp_init, cfg), dim, cfg)

    def value(th):
        v, _ = _value_and_grad(prior, grams, crosses, n_obs, sum_sq, th, cfg, False)
        return v

    try:
        l_cur, grad = _value_and_grad(prior, grams, crosses, n_obs, sum_sq, theta, cfg, True)
    except NumericalError as exc:
        return HyperFitResult(hp_init, False, 0, [], f"objective failed at start: {exc}")

    trace = [l_cur]
    stepped = False
    converged = False
    n_iters = 0
    step0 = cfg.step_size
    for n_iters in range(1, cfg.max_iters + 1):
        if np.max(np.abs(grad)) <= cfg.grad_tol:
            converged = True
            n_iters -= 1
            break
        step = step0
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = _project(theta + step * grad, dim, cfg)
            try:
                l_cand = value(cand)
            except NumericalError:
                step *= 0.5
                continue
            if l_cand >= l_cur:
                theta, l_cur, accepted, stepped = cand, l_cand, True, True
                break
            step *= 0.5
        if not accepted:
            break
        # Grow the next trial step off the accepted one; backtracking keeps
        # the ascent monotone whatever the scale of the objective.
        step0 = min(step * 2.0, 1e4 * cfg.step_size)
        trace.append(l_cur)
        try:
            _, grad = _value_and_grad(prior, grams, crosses, n_obs, sum_sq, theta, cfg, True)
        except NumericalError as exc:
            return HyperFitResult(
                _unpack(theta, dim, cfg), False, n_iters, trace,
                f"gradient failed mid-run: {exc}",
            )
    if not stepped:
        # Warm start already stationary (or no ascent step exists): keep it as-is.
        return HyperFitResult(hp_init, converged, n_iters, trace,
                              "" if converged else "no ascent step found")
    msg = "" if converged else f"stopped after {n_iters} iterations without meeting grad_tol"
    return HyperFitResult(_unpack(theta, dim, cfg), converged, n_iters, trace, msg)


# ---- pooled (single-block) specialization --------------------------------


def pooled_objective(
    prior: PriorSpec, gram: np.ndarray, cross: np.ndarray, n_obs: int, sum_sq: float,
    noise_var: float,
) -> float:
    """Marginal objective for a fully pooled model (no random effects)."""
    inputs = MarginalObjectiveInputs(
        prior_precision=np.linalg.inv(prior.cov),
        noise_precision=1.0 / noise_var,
        gram=gram,
        cross=cross,
        prior_mean=prior.mean,
        sum_sq=sum_sq,
        n_obs=n_obs,
    )
    return marginal_log_likelihood(inputs)


def update_noise_variance(
    prior: PriorSpec,
    gram: np.ndarray,
    cross: np.ndarray,
    n_obs: int,
    sum_sq: float,
    sigma_init: float,
    cfg: OptimizerConfig | None = None,
) -> HyperFitResult:
    """Noise-variance-only ascent for the pooled model; same engine, one coordinate."""
    cfg = cfg or OptimizerConfig()
    if n_obs == 0:
        hp = HyperParams(sigma_init, np.zeros_like(prior.cov))
        return HyperFitResult(hp, True, 0, [], "no observations; objective constant")
    x = np.linalg.inv(prior.cov)
    x = 0.5 * (x + x.T)
    xmu = x @ prior.mean

    def value_grad(log_sig: float) -> tuple[float, float]:
        y = float(np.exp(-log_sig))
        g = x + y * gram
        cg = cho_factor(0.5 * (g + g.T), lower=True)
        logdet_g = 2.0 * float(np.sum(np.log(np.diag(cg[0]))))
        h = xmu + y * cross
        v = cho_solve(cg, h)
        logdet_x = 2.0 * float(np.sum(np.log(np.diag(cho_factor(x, lower=True)[0]))))
        val = (
            logdet_x - logdet_g + n_obs * np.log(y) - y * sum_sq
            - float(prior.mean @ xmu) + float(h @ v)
        )
        tr_ga = float(np.sum(cho_solve(cg, gram).diagonal()))
        dl_dy = -tr_ga + n_obs / y - sum_sq + 2.0 * float(cross @ v) - float(v @ gram @ v)
        return val, -y * dl_dy

    log_sig = max(float(np.log(sigma_init)), np.log(cfg.sigma_floor))
    l_cur, grad = value_grad(log_sig)
    trace = [l_cur]
    stepped = False
    converged = False
    n_iters = 0
    step0 = cfg.step_size
    for n_iters in range(1, cfg.max_iters + 1):
        if abs(grad) <= cfg.grad_tol:
            converged = True
            n_iters -= 1
            break
        step = step0
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = max(log_sig + step * grad, np.log(cfg.sigma_floor))
            l_cand, g_cand = value_grad(cand)
            if l_cand >= l_cur:
                log_sig, l_cur, grad, accepted, stepped = cand, l_cand, g_cand, True, True
                break
            step *= 0.5
        if not accepted:
            break
        step0 = min(step * 2.0, 1e4 * cfg.step_size)
        trace.append(l_cur)
    sigma = sigma_init if not stepped else float(np.exp(log_sig))
    hp = HyperParams(sigma, np.zeros_like(prior.cov))
    msg = "" if converged else f"stopped after {n_iters} iterations without meeting grad_tol"
    return HyperFitResult(hp, converged, n_iters, trace, msg)
