"""Seeded trial orchestration: decision loop, logging, aggregation, replay.

One trial runs the twice-daily decision loop for every simulated user, with
nightly posterior and weekly hyperparameter refreshes fed engineered rewards,
while raw rewards accumulate the evaluation metric.  Runs are addressed by
(root seed, trial index) and every stochastic consumer draws from its own
named substream, so seed-matched trials see identical environments whichever
algorithm is being compared.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .agents import make_agent
from .empirical_bayes import OptimizerConfig
from .features import StateTriple
from .policy import DecisionRecord, SmoothingParams, sample_action, GH_NODES_DEFAULT
from .priors import default_hyperparams, default_prior
from .rng import substream
from .simenv import EnvConfig, Environment, generate_user_population

log = logging.getLogger(__name__)


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class TrialConfig:
    algorithm: str = "rebandit"
    env: EnvConfig = field(default_factory=EnvConfig)
    n_users: int = 120
    n_days: int = 30
    n_trials: int = 500
    seed: int = 0
    posterior_cadence: int = 2      # decision points; 2 = nightly. 0 disables.
    hyperparam_cadence: int = 14    # decision points; 14 = weekly. 0 disables.
    penalty_weight: float = 0.2
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    solver: str = "structured"
    gh_nodes: int = GH_NODES_DEFAULT
    n_workers: int = 1
    time_budget_s: float = 300.0

    def __post_init__(self):
        if self.algorithm not in ("rebandit", "blr", "random"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.n_users < 1 or self.n_days < 1 or self.n_trials < 1:
            raise ValueError("users, days, and trials must all be positive")
        for name in ("posterior_cadence", "hyperparam_cadence"):
            cad = getattr(self, name)
            if cad < 0:
                raise ValueError(f"{name} must be >= 0 (0 disables)")
            if cad and cad % 2:
                raise ValueError(f"{name} must cover whole days (a multiple of 2)")
        if (
            self.posterior_cadence
            and self.hyperparam_cadence
            and self.hyperparam_cadence % self.posterior_cadence
        ):
            raise ValueError("hyperparameter cadence must be a multiple of the posterior cadence")
        if self.solver not in ("structured", "dense"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def n_steps(self) -> int:
        return 2 * self.n_days

    def to_dict(self) -> dict:
        return asdict(self)

    def semantic_dict(self) -> dict:
        """Config without execution-only fields (worker count, time budget)."""
        d = self.to_dict()
        d.pop("n_workers", None)
        d.pop("time_budget_s", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialConfig":
        d = dict(d)
        if "env" in d and isinstance(d["env"], dict):
            d["env"] = EnvConfig(**d["env"])
        if "smoothing" in d and isinstance(d["smoothing"], dict):
            d["smoothing"] = SmoothingParams(**d["smoothing"])
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(_dumps(self.semantic_dict()).encode()).hexdigest()


@dataclass
class TrialResult:
    trial_index: int
    user_totals: np.ndarray
    send_rate: float
    warnings: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def trial_mean(self) -> float:
        return float(np.mean(self.user_totals))


def _build_agent(cfg: TrialConfig):
    return make_agent(
        cfg.algorithm,
        cfg.n_users,
        default_prior(),
        default_hyperparams(),
        cfg.smoothing,
        cfg.penalty_weight,
        cfg.optimizer,
        cfg.solver,
        cfg.gh_nodes,
    )


def run_trial(
    cfg: TrialConfig,
    trial_index: int,
    env_factory=None,
    log_stream=None,
) -> TrialResult:
    """Execute one seeded trial; optionally append JSON-lines records to ``log_stream``."""
    start = time.perf_counter()
    pop_rng = substream(cfg.seed, trial_index, "population")
    env_rng = substream(cfg.seed, trial_index, "environment")
    pol_rng = substream(cfg.seed, trial_index, "policy")

    population = generate_user_population(cfg.env, cfg.n_users, pop_rng)
    factory = env_factory or Environment
    env = factory(population, cfg.env, cfg.n_days, env_rng)
    agent = _build_agent(cfg)

    if log_stream is not None:
        log_stream.write(
            _dumps(
                {"type": "trial_config", "trial_index": trial_index, "config": cfg.semantic_dict()}
            )
            + "\n"
        )

    totals = np.zeros(cfg.n_users)
    n_sends = 0
    warnings: list[str] = []
    for t in range(cfg.n_steps):
        for user in range(cfg.n_users):
            state = env.rl_state(user, t)
            pi = agent.action_probability(user, state)
            action, draw = sample_action(pi, pol_rng)
            raw = env.step(user, t, action)
            engineered = agent.observe(user, state, pi, action, raw)
            totals[user] += raw
            n_sends += action
            if log_stream is not None:
                rec = DecisionRecord(user, t, tuple(state), pi, action, draw, raw, engineered)
                log_stream.write(_dumps(rec.to_dict()) + "\n")
        done = t + 1
        if cfg.hyperparam_cadence and done % cfg.hyperparam_cadence == 0:
            fit = agent.update_hyperparams()
            if fit is not None:
                if not fit.converged:
                    warnings.append(f"t={t}: hyperparameter fit: {fit.message}")
                if log_stream is not None:
                    hp = fit.hyperparams
                    log_stream.write(
                        _dumps(
                            {
                                "type": "update",
                                "kind": "hyperparams",
                                "t": t,
                                "noise_var": hp.noise_var,
                                "re_var_diag": list(np.diag(hp.random_effects_cov)),
                                "converged": fit.converged,
                                "n_iters": fit.n_iters,
                            }
                        )
                        + "\n"
                    )
        if cfg.posterior_cadence and done % cfg.posterior_cadence == 0:
            agent.update_posterior()
            if log_stream is not None:
                log_stream.write(_dumps({"type": "update", "kind": "posterior", "t": t}) + "\n")

    elapsed = time.perf_counter() - start
    if elapsed > cfg.time_budget_s:
        log.warning(
            "trial %d took %.1fs, over the %.0fs budget", trial_index, elapsed, cfg.time_budget_s
        )
        warnings.append(f"wall time {elapsed:.1f}s exceeded budget {cfg.time_budget_s:.0f}s")
    return TrialResult(trial_index, totals, n_sends / (cfg.n_steps * cfg.n_users), warnings, elapsed)


# ---- aggregation ----------------------------------------------------------


@dataclass
class Summary:
    n_trials: int
    n_users: int
    mean_total_reward: float
    ci_half_width_pooled: float
    ci_half_width_trial_means: float
    mean_send_rate: float
    trial_means: np.ndarray


def _ci_half_width(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    sd = float(np.std(values, ddof=1))
    return 1.96 * sd / np.sqrt(values.size)


def aggregate(results: list[TrialResult]) -> Summary:
    """Pooled mean of per-user totals with 95% CIs (user-pooled and per-trial)."""
    pooled = np.concatenate([r.user_totals for r in results])
    trial_means = np.array([r.trial_mean for r in results])
    return Summary(
        n_trials=len(results),
        n_users=results[0].user_totals.size,
        mean_total_reward=float(pooled.mean()),
        ci_half_width_pooled=_ci_half_width(pooled),
        ci_half_width_trial_means=_ci_half_width(trial_means),
        mean_send_rate=float(np.mean([r.send_rate for r in results])),
        trial_means=trial_means,
    )


def pairwise_win_count(a: np.ndarray, b: np.ndarray) -> int:
    """Seed-matched trials where a's per-trial mean strictly beats b's."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("win counting needs equally many seed-matched trials")
    return int(np.sum(a > b))


# ---- experiment driver ------------------------------------------------------


def _run_one_for_pool(payload: tuple[dict, int, str | None]) -> dict:
    cfg_dict, trial_index, log_dir = payload
    cfg = TrialConfig.from_dict(cfg_dict)
    stream = None
    if log_dir is not None:
        path = os.path.join(log_dir, f"trial_{trial_index:05d}.jsonl")
        stream = open(path, "w", encoding="utf-8", newline="\n")
    try:
        res = run_trial(cfg, trial_index, log_stream=stream)
    finally:
        if stream is not None:
            stream.close()
    return {
        "trial_index": res.trial_index,
        "user_totals": res.user_totals.tolist(),
        "send_rate": res.send_rate,
        "warnings": res.warnings,
        "wall_time_s": res.wall_time_s,
    }


def run_experiment(
    cfg: TrialConfig,
    out_dir: str | None = None,
    variant_label: str = "custom",
    env_factory=None,
) -> tuple[list[TrialResult], Summary]:
    """Run cfg.n_trials seeded trials, optionally writing logs/CSVs under out_dir."""
    log_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_dir = os.path.join(out_dir, "logs")
        os.makedirs(log_dir, exist_ok=True)

    results: list[TrialResult] = []
    if cfg.n_workers > 1 and env_factory is None:
        payloads = [(cfg.to_dict(), i, log_dir) for i in range(cfg.n_trials)]
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.n_workers) as pool:
            for raw in pool.map(_run_one_for_pool, payloads):
                results.append(
                    TrialResult(
                        raw["trial_index"],
                        np.array(raw["user_totals"]),
                        raw["send_rate"],
                        raw["warnings"],
                        raw["wall_time_s"],
                    )
                )
        results.sort(key=lambda r: r.trial_index)
    else:
        for i in range(cfg.n_trials):
            stream = None
            if log_dir is not None:
                path = os.path.join(log_dir, f"trial_{i:05d}.jsonl")
                stream = open(path, "w", encoding="utf-8", newline="\n")
            try:
                results.append(run_trial(cfg, i, env_factory=env_factory, log_stream=stream))
            finally:
                if stream is not None:
                    stream.close()

    summary = aggregate(results)
    if out_dir is not None:
        _write_outputs(cfg, summary, out_dir, variant_label)
    return results, summary


def _write_outputs(cfg: TrialConfig, summary: Summary, out_dir: str, variant_label: str) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.config_hash(),
        "package_version": __version__,
        "variant": variant_label,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    with open(os.path.join(out_dir, "trial_means.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_index", "mean_total_reward"])
        for i, v in enumerate(summary.trial_means):
            writer.writerow([i, repr(float(v))])

    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "algorithm", "variant", "n_trials", "n_users", "n_days", "seed",
                "penalty_weight", "mean_total_reward", "ci_half_width_pooled",
                "ci_half_width_trial_means", "mean_send_rate",
            ]
        )
        writer.writerow(
            [
                cfg.algorithm, variant_label, summary.n_trials, summary.n_users,
                cfg.n_days, cfg.seed, repr(cfg.penalty_weight),
                repr(summary.mean_total_reward), repr(summary.ci_half_width_pooled),
                repr(summary.ci_half_width_trial_means), repr(summary.mean_send_rate),
            ]
        )


# ---- comparison -------------------------------------------------------------


def load_trial_means(run_dir: str) -> tuple[dict, np.ndarray]:
    with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    means = []
    with open(os.path.join(run_dir, "trial_means.csv"), encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            means.append(float(row["mean_total_reward"]))
    return manifest, np.array(means)


def compare_runs(dir_a: str, dir_b: str) -> dict:
    """Seed-matched comparison: means, CIs, win counts, and a CI-overlap verdict."""
    man_a, means_a = load_trial_means(dir_a)
    man_b, means_b = load_trial_means(dir_b)
    for key in ("seed", "n_trials", "n_users", "n_days"):
        if man_a["config"][key] != man_b["config"][key]:
            raise ValueError(f"runs are not seed-matched: {key} differs")
    n = means_a.size
    mean_a, mean_b = float(means_a.mean()), float(means_b.mean())
    ci_a, ci_b = _ci_half_width(means_a), _ci_half_width(means_b)
    wins_a = pairwise_win_count(means_a, means_b)
    wins_b = pairwise_win_count(means_b, means_a)
    if abs(mean_a - mean_b) > ci_a + ci_b:
        verdict = "a_significantly_better" if mean_a > mean_b else "b_significantly_better"
    elif wins_a > n // 2:
        verdict = "overlap_a_majority"
    elif wins_b > n // 2:
        verdict = "overlap_b_majority"
    else:
        verdict = "overlap_tied"
    return {
        "algorithm_a": man_a["config"]["algorithm"],
        "algorithm_b": man_b["config"]["algorithm"],
        "n_trials": n,
        "mean_a": mean_a,
        "mean_b": mean_b,
        "ci_half_width_a": ci_a,
        "ci_half_width_b": ci_b,
        "wins_a": wins_a,
        "wins_b": wins_b,
        "ties": n - wins_a - wins_b,
        "verdict": verdict,
    }


# ---- replay ------------------------------------------------------------------


@dataclass
class ReplayReport:
    n_decisions: int
    pi_mismatches: int
    action_mismatches: int
    max_pi_diff: float

    @property
    def ok(self) -> bool:
        return self.pi_mismatches == 0 and self.action_mismatches == 0


def replay_trial_log(path: str) -> ReplayReport:
    """Recompute every probability and action from a trial log, without the environment."""
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "trial_config":
        raise ValueError(f"{path} does not start with a trial_config record")
    cfg = TrialConfig.from_dict(records[0]["config"])
    agent = _build_agent(cfg)
    n = pi_bad = act_bad = 0
    max_diff = 0.0
    for rec in records[1:]:
        kind = rec.get("type")
        if kind == "decision":
            dec = DecisionRecord.from_dict(rec)
            state = StateTriple(*dec.state)
            pi = agent.action_probability(dec.user, state)
            action = int(dec.draw < pi)
            n += 1
            max_diff = max(max_diff, abs(pi - dec.pi))
            if pi != dec.pi:
                pi_bad += 1
            if action != dec.action:
                act_bad += 1
            agent.observe(dec.user, state, pi, action, dec.raw_reward)
        elif kind == "update":
            if rec["kind"] == "hyperparams":
                agent.update_hyperparams()
            else:
                agent.update_posterior()
    return ReplayReport(n, pi_bad, act_bad, max_diff)
