"""Population/user decomposition of the posterior for after-study analysis.

The adaptive-pooling posterior can be rewritten as a joint Gaussian over the
shared population parameters and each user's deviation.  The decomposition
exposes population-level averages that concentrate as the cohort grows, plus
a per-user implicit feature pair (Gram block, cross moment); marginalizing it
back to the per-user parameters must reproduce the direct posterior, which is
the correctness gate for this module.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .posterior import SufficientStats
from .priors import HyperParams, PriorSpec


@dataclass
class PopulationStatistics:
    """Cohort averages driving the shared part of the decomposed posterior."""

    cross_avg: np.ndarray          # mean of per-user cross moments
    cross_shrunk_avg: np.ndarray   # mean of gram @ psi^-1 @ cross
    gram_avg: np.ndarray           # mean of per-user Gram blocks
    gram_shrunk_avg: np.ndarray    # mean of gram @ psi^-1 @ gram
    info: np.ndarray               # precision-like matrix combining the above
    pop_mean: np.ndarray           # posterior mean of the population parameters
    user_precisions: np.ndarray    # psi_i = noise_var * re_cov^-1 + gram_i


@dataclass
class UserDecomposition:
    """Joint Gaussian over (population parameters, one user's deviation)."""

    pop_mean: np.ndarray
    dev_mean: np.ndarray
    cov_pop: np.ndarray        # population block
    cov_cross: np.ndarray      # population/deviation block
    cov_dev: np.ndarray        # deviation block

    def combined_mean(self) -> np.ndarray:
        return self.pop_mean + self.dev_mean

    def combined_cov(self) -> np.ndarray:
        return self.cov_pop + self.cov_cross + self.cov_cross.T + self.cov_dev


def population_statistics(
    prior: PriorSpec, hp: HyperParams, stats: list[SufficientStats]
) -> PopulationStatistics:
    m = len(stats)
    if m < 1:
        raise ValueError("need at least one user")
    re_prec = np.linalg.inv(hp.random_effects_cov)
    re_prec = 0.5 * (re_prec + re_prec.T)
    sig2 = hp.noise_var
    psis = np.stack([sig2 * re_prec + s.gram for s in stats])
    try:
        psi_inv = np.linalg.inv(psis)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("degenerate hyperparameters: psi not invertible") from exc
    grams = np.stack([s.gram for s in stats])
    crosses = np.stack([s.cross for s in stats])
    cross_avg = crosses.mean(axis=0)
    gram_avg = grams.mean(axis=0)
    shrunk_cross = np.einsum("ipq,iqr,ir->p", grams, psi_inv, crosses) / m
    shrunk_gram = np.einsum("ipq,iqr,irs->ps", grams, psi_inv, grams) / m
    prior_prec = np.linalg.inv(prior.cov)
    prior_prec = 0.5 * (prior_prec + prior_prec.T)
    info = prior_prec / m + (gram_avg - shrunk_gram) / sig2
    rhs = prior_prec @ prior.mean / m + (cross_avg - shrunk_cross) / sig2
    pop_mean = np.linalg.solve(info, rhs)
    return PopulationStatistics(
        cross_avg=cross_avg,
        cross_shrunk_avg=shrunk_cross,
        gram_avg=gram_avg,
        gram_shrunk_avg=shrunk_gram,
        info=0.5 * (info + info.T),
        pop_mean=pop_mean,
        user_precisions=psis,
    )


def joint_posterior(
    prior: PriorSpec, hp: HyperParams, stats: list[SufficientStats]
) -> list[UserDecomposition]:
    """Per-user joint Gaussian over (population parameters, user deviation)."""
    m = len(stats)
    pop = population_statistics(prior, hp, stats)
    lam = pop.pop_mean
    cov_pop = np.linalg.inv(m * pop.info)
    cov_pop = 0.5 * (cov_pop + cov_pop.T)
    out = []
    for i, s in enumerate(stats):
        psi_inv = np.linalg.inv(pop.user_precisions[i])
        psi_inv = 0.5 * (psi_inv + psi_inv.T)
        dev_mean = psi_inv @ (s.cross - s.gram @ lam)
        cov_cross = -cov_pop @ s.gram @ psi_inv
        cov_dev = hp.noise_var * psi_inv + psi_inv @ s.gram @ cov_pop @ s.gram @ psi_inv
        out.append(
            UserDecomposition(
                pop_mean=lam,
                dev_mean=dev_mean,
                cov_pop=cov_pop,
                cov_cross=cov_cross,
                cov_dev=0.5 * (cov_dev + cov_dev.T),
            )
        )
    return out


def diagnose_log(log_path: str, out_csv: str) -> int:
    """Replay a trial log and emit the population statistics at each posterior epoch."""
    from .features import StateTriple, design_vector
    from .policy import RewardEngineering
    from .priors import default_hyperparams, default_prior
    from .trial import TrialConfig

    with open(log_path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "trial_config":
        raise ValueError(f"{log_path} does not start with a trial_config record")
    cfg = TrialConfig.from_dict(records[0]["config"])
    if cfg.algorithm != "rebandit":
        raise ValueError("population diagnostics need an adaptive-pooling (rebandit) log")

    prior = default_prior()
    hp = default_hyperparams()
    stats = [SufficientStats.zeros(prior.dim) for _ in range(cfg.n_users)]
    rewards = RewardEngineering(cfg.penalty_weight)
    epochs = []
    for rec in records[1:]:
        if rec.get("type") == "decision":
            state = StateTriple(*rec["state"])
            engineered = rewards.engineer(rec["user"], rec["raw_reward"], rec["action"])
            rewards.record(rec["user"], rec["raw_reward"])
            stats[rec["user"]].add(design_vector(state, rec["action"], rec["pi"]), engineered)
        elif rec.get("type") == "update" and rec["kind"] == "hyperparams":
            hp = HyperParams(
                noise_var=rec["noise_var"], random_effects_cov=np.diag(rec["re_var_diag"])
            )
        elif rec.get("type") == "update" and rec["kind"] == "posterior":
            epochs.append((rec["t"], hp.noise_var, population_statistics(prior, hp, stats)))

    p = prior.dim
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["epoch", "t", "noise_var"]
        header += [f"pop_mean_{j}" for j in range(p)]
        header += [f"cross_avg_{j}" for j in range(p)]
        header += ["gram_avg_trace", "gram_shrunk_trace", "info_min_eig"]
        writer.writerow(header)
        for k, (t, noise_var, pop) in enumerate(epochs):
            row = [k, t, repr(float(noise_var))]
            row += [repr(float(v)) for v in pop.pop_mean]
            row += [repr(float(v)) for v in pop.cross_avg]
            row += [
                repr(float(np.trace(pop.gram_avg))),
                repr(float(np.trace(pop.gram_shrunk_avg))),
                repr(float(np.linalg.eigvalsh(pop.info).min())),
            ]
            writer.writerow(row)
    return len(epochs)
