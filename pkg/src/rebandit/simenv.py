"""Simulation testbed: multinomial-logistic user models and trajectory generation.

Each simulated participant is a 4-class multinomial logistic regression over
13 environment features (intercept, survey completion, app usage, cannabis
use, weekend, day-in-study, the same six interacted with the action, and a
dosage column used by the habituation variants).  Base models are drawn with
replacement from a fixed pool; the pool is either synthesized from seeded
Gaussian weight templates or loaded from a versioned JSON weight file so
externally fitted weights can be dropped in without code changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .features import StateTriple

N_CLASSES = 4
N_FEATURES = 13
BASELINE_COLS = slice(0, 6)
ADVANTAGE_COLS = slice(6, 12)
ADV_INTERCEPT_COL = 6
DOSAGE_COL = 12

DOSAGE_KAPPA = 5.0 / 6.0
DOSAGE_LOOKBACK = 6

TREATMENT_MULTIPLIER = {"low": 0.7, "high": 2.5}
HABITUATION_ETA = {"low": 6.0, "high": 1.0}

# Feature normalization: day-in-study, app seconds, and grams of cannabis are
# mapped to [-1, 1] around their population centers.
DAY_CENTER, DAY_SCALE = 15.5, 14.5
APP_CENTER, APP_SCALE = 350.0, 350.0
CANNABIS_CENTER, CANNABIS_SCALE = 1.3, 1.35
APP_MAX_SECONDS = 700.0
CANNABIS_GRAMS_GRID = np.array([0.25, 0.5, 1.0, 1.5, 2.0, 2.5])
CANNABIS_GRAMS_PROBS = np.array([0.25, 0.20, 0.20, 0.15, 0.12, 0.08])
MORNING_SPLIT, EVENING_SPLIT = 0.33, 0.67
USE_UPSCALE = 1.5

# Class-weight templates for synthetic pools (rows = reward classes 0..3).
# Columns sum to zero; engaged behavior (survey, app use) favors high classes,
# and class 0's baseline-weight sum dominates in magnitude so the habituation
# construction always pushes probability mass toward reward 0.
_TEMPLATE = np.array(
    [
        # icpt  survey   app   cannabis wknd   day   a*icpt a*srv  a*app  a*cb  a*wknd a*day
        [0.90, -1.60, -1.00,  0.40,  0.20,  0.40, -0.05, -0.05, -0.03,  0.03, 0.00,  0.03],
        [0.30, -0.20,  0.00,  0.10,  0.00,  0.10,  0.00,  0.00,  0.00,  0.00, 0.00,  0.00],
        [-0.50,  0.80,  0.40, -0.20, -0.10, -0.20,  0.00,  0.00,  0.00,  0.00, 0.00, -0.015],
        [-0.70,  1.00,  0.60, -0.30, -0.10, -0.30,  0.05,  0.05,  0.03, -0.03, 0.00, -0.015],
    ]
)
# Per-entry dispersion at heterogeneity 1.0 (the knob's maximum).
_SCALE = np.array(
    [[0.35, 0.35, 0.30, 0.25, 0.15, 0.25, 0.50, 0.15, 0.15, 0.15, 0.15, 0.15]] * N_CLASSES
)
_DOMINANCE_MARGIN = 0.05

WEIGHT_FILE_VERSION = 1


@dataclass(frozen=True)
class EnvConfig:
    treatment_effect: str = "minimal"      # minimal | low | high
    habituation: str = "none"              # none | low | high
    habituation_proportion: float = 1.0
    heterogeneity: float = 0.5             # in [0, 1]; 1.0 = maximum dispersion
    pool_size: int = 42
    weight_file: str | None = None
    start_day: int = 0                     # weekday of study day 1; 0 = Monday

    def __post_init__(self):
        if self.treatment_effect not in ("minimal", "low", "high"):
            raise ValueError(f"unknown treatment effect {self.treatment_effect!r}")
        if self.habituation not in ("none", "low", "high"):
            raise ValueError(f"unknown habituation level {self.habituation!r}")
        if not 0.0 <= self.habituation_proportion <= 1.0:
            raise ValueError("habituation proportion must lie in [0, 1]")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError("heterogeneity knob must lie in [0, 1]")
        if self.pool_size < 1:
            raise ValueError("pool must hold at least one model")


def standard_variants() -> dict[str, EnvConfig]:
    """The 15-cell grid: treatment effect x habituation (level, proportion)."""
    out: dict[str, EnvConfig] = {}
    for te in ("minimal", "low", "high"):
        out[f"{te}-none"] = EnvConfig(treatment_effect=te)
        for hb in ("low", "high"):
            for prop in (0.5, 1.0):
                name = f"{te}-{hb}-{int(prop * 100)}"
                out[name] = EnvConfig(
                    treatment_effect=te, habituation=hb, habituation_proportion=prop
                )
    return out


def variant_config(variant: str, base: EnvConfig | None = None) -> EnvConfig:
    """Resolve a variant id ("1".."15" or a name like "low-high-100")."""
    table = standard_variants()
    names = list(table)
    if variant.isdigit():
        idx = int(variant) - 1
        if not 0 <= idx < len(names):
            raise ValueError(f"variant number must be 1..{len(names)}")
        variant = names[idx]
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; known: {', '.join(names)}")
    resolved = table[variant]
    if base is None:
        return resolved
    return replace(
        base,
        treatment_effect=resolved.treatment_effect,
        habituation=resolved.habituation,
        habituation_proportion=resolved.habituation_proportion,
    )


@dataclass
class UserModelMLR:
    """4-class multinomial logistic user model over the 13 environment features."""

    weights: np.ndarray
    has_habituation: bool = False
    source: str = "synthetic"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (N_CLASSES, N_FEATURES):
            raise ValueError(f"weights must be {N_CLASSES}x{N_FEATURES}, got {w.shape}")
        if not self.has_habituation and np.any(w[:, DOSAGE_COL] != 0.0):
            raise ValueError("dosage weights must be zero without habituation")
        self.weights = w

    def copy(self) -> "UserModelMLR":
        return UserModelMLR(self.weights.copy(), self.has_habituation, self.source)


@dataclass
class Population:
    user_models: list[UserModelMLR]
    pool: list[UserModelMLR]
    assignment: np.ndarray
    habituated: np.ndarray


def _sum_to_zero(weights: np.ndarray) -> np.ndarray:
    return weights - weights.mean(axis=0, keepdims=True)


def _class0_dominates(weights: np.ndarray) -> bool:
    sums = weights[:, BASELINE_COLS].sum(axis=1)
    sign = 1.0 if sums[0] >= 0 else -1.0
    return bool(np.all(abs(sums[0]) - sign * sums[1:] >= _DOMINANCE_MARGIN))


def _synthesize_pool(cfg: EnvConfig, rng: np.random.Generator) -> list[UserModelMLR]:
    pool = []
    for k in range(cfg.pool_size):
        for _ in range(200):
            noise = rng.normal(size=(N_CLASSES, N_FEATURES - 1))
            w = _sum_to_zero(_TEMPLATE + cfg.heterogeneity * _SCALE * noise)
            if _class0_dominates(w):
                break
        else:
            # Enforce dominance directly: deepen the class-0 intercept until
            # its baseline-weight sum has the largest magnitude again.
            sums = w[:, BASELINE_COLS].sum(axis=1)
            w[0, 0] -= abs(sums).max() + 2 * _DOMINANCE_MARGIN - sums[0]
            w = _sum_to_zero(w)
        full = np.hstack([w, np.zeros((N_CLASSES, 1))])
        pool.append(UserModelMLR(full, source=f"synthetic:{k}"))
    return pool


def load_weight_file(path: str) -> list[UserModelMLR]:
    """Pool of base models from a versioned JSON weight file."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read weight file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != WEIGHT_FILE_VERSION:
        raise ValueError(f"weight file {path} must declare version {WEIGHT_FILE_VERSION}")
    models = payload.get("models")
    if not isinstance(models, list) or not models:
        raise ValueError(f"weight file {path} holds no models")
    pool = []
    for k, entry in enumerate(models):
        try:
            w = np.asarray(entry["weights"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"weight file {path} model {k} is malformed: {exc}") from exc
        if w.shape != (N_CLASSES, N_FEATURES):
            raise ValueError(
                f"weight file {path} model {k}: expected {N_CLASSES}x{N_FEATURES} weights"
            )
        has_dosage = bool(np.any(w[:, DOSAGE_COL] != 0.0))
        pool.append(UserModelMLR(w, has_habituation=has_dosage, source=f"file:{path}#{k}"))
    return pool


def apply_treatment_effect(model: UserModelMLR, level: str) -> UserModelMLR:
    """Restructure and rescale the advantage intercepts for the low/high variants.

    The minimum advantage intercept is swapped into class 0, classes 2 and 3
    are set to the mean of their two (post-swap) values, and the whole column
    is multiplied by the level's factor.  "minimal" returns a plain copy.
    """
    out = model.copy()
    if level == "minimal":
        return out
    mult = TREATMENT_MULTIPLIER[level]
    col = out.weights[:, ADV_INTERCEPT_COL]
    k = int(np.argmin(col))
    if k != 0:
        col[0], col[k] = col[k], col[0]
    col[2] = col[3] = 0.5 * (col[2] + col[3])
    col *= mult
    return out


def apply_habituation(model: UserModelMLR, eta: float) -> UserModelMLR:
    """Add dosage weights: each class's baseline-weight sum over eta.

    The shared sign makes the class-0 weight non-negative, so recent sends
    shift probability mass toward the low reward classes.
    """
    if eta <= 0:
        raise ValueError("habituation intensity must be positive")
    out = model.copy()
    sums = out.weights[:, BASELINE_COLS].sum(axis=1)
    sign = 1.0 if sums[0] >= 0 else -1.0
    out.weights[:, DOSAGE_COL] = sign * sums / eta
    out.has_habituation = True
    return out


def generate_user_population(
    cfg: EnvConfig, n_users: int, rng: np.random.Generator
) -> Population:
    """Draw n_users models with replacement from the (variant-adjusted) pool."""
    if cfg.weight_file:
        base = load_weight_file(cfg.weight_file)
    else:
        base = _synthesize_pool(cfg, rng)
    pool = [apply_treatment_effect(mdl, cfg.treatment_effect) for mdl in base]
    assignment = rng.integers(0, len(pool), size=n_users)
    habituated = np.zeros(n_users, dtype=bool)
    if cfg.habituation != "none" and cfg.habituation_proportion > 0:
        count = int(round(n_users * cfg.habituation_proportion))
        if count:
            habituated[rng.choice(n_users, size=count, replace=False)] = True
    eta = HABITUATION_ETA.get(cfg.habituation)
    user_models = []
    for i in range(n_users):
        mdl = pool[assignment[i]]
        user_models.append(apply_habituation(mdl, eta) if habituated[i] else mdl.copy())
    return Population(user_models, pool, assignment, habituated)


# ---- dosage --------------------------------------------------------------


def dosage_weights(kappa: float = DOSAGE_KAPPA, lookback: int = DOSAGE_LOOKBACK) -> np.ndarray:
    """Geometric weights over the last `lookback` actions, summing to one."""
    norm = (1.0 - kappa) / (1.0 - kappa**lookback)
    return norm * kappa ** np.arange(lookback)


def compute_dosage(recent_actions, kappa: float = DOSAGE_KAPPA) -> float:
    """Weighted recent-send average; ``recent_actions[0]`` is the latest action."""
    w = dosage_weights(kappa)
    acts = np.asarray(list(recent_actions)[: DOSAGE_LOOKBACK], dtype=float)
    return float(np.sum(w[: acts.size] * acts))


# ---- reward generation -----------------------------------------------------


def class_probabilities(
    model: UserModelMLR, base_features: np.ndarray, action: int, dosage: float = 0.0
) -> np.ndarray:
    """Softmax class probabilities for one decision."""
    x = np.concatenate([base_features, action * base_features, [dosage]])
    logits = model.weights @ x
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def sample_reward(
    model: UserModelMLR,
    base_features: np.ndarray,
    action: int,
    dosage: float = 0.0,
    *,
    u: float | None = None,
    rng: np.random.Generator | None = None,
) -> int:
    """Categorical reward draw via inverse CDF on a single uniform."""
    if u is None:
        if rng is None:
            raise ValueError("provide either a uniform draw or a generator")
        u = float(rng.random())
    probs = class_probabilities(model, base_features, action, dosage)
    return int(min(np.searchsorted(np.cumsum(probs), u, side="right"), N_CLASSES - 1))


def synthesize_observables(prev_reward: int) -> tuple[int, int, int]:
    """(survey completion, app-usage indicator, activity answer) implied by a reward."""
    if prev_reward not in (0, 1, 2, 3):
        raise ValueError(f"reward must be in 0..3, got {prev_reward}")
    return int(prev_reward >= 2), int(prev_reward >= 1), int(prev_reward == 3)


def initial_state() -> StateTriple:
    """First decision point: no engagement yet, morning, regular cannabis use."""
    return StateTriple(0, 0, 1)


def normalize_day(day_in_study: int) -> float:
    return (day_in_study - DAY_CENTER) / DAY_SCALE


def normalize_app_seconds(seconds: float) -> float:
    return (seconds - APP_CENTER) / APP_SCALE


def normalize_cannabis(grams: float) -> float:
    return float(np.clip((grams - CANNABIS_CENTER) / CANNABIS_SCALE, -1.0, 1.0))


class Environment:
    """One trial's worth of simulated participants.

    All exogenous randomness (observable traces, report behavior, reward
    uniforms) is drawn up front from the environment stream, so the draw for a
    given (user, decision point) is identical whichever policy is being run.
    """

    def __init__(
        self,
        population: Population,
        cfg: EnvConfig,
        n_days: int,
        rng: np.random.Generator,
    ):
        self.population = population
        self.cfg = cfg
        self.n_days = n_days
        self.n_steps = 2 * n_days
        m, t = len(population.user_models), self.n_steps

        self._report_prop = rng.beta(2.0, 2.0, size=m)        # chance a use episode occurs
        self._survey_prop = rng.beta(5.0, 2.0, size=m)        # chance the survey trace is 1
        self._app_prop = rng.beta(2.0, 3.0, size=m)           # typical app-usage intensity
        self._survey = rng.random(size=(m, t)) < self._survey_prop[:, None]
        a = np.maximum(4.0 * self._app_prop, 1e-3)
        b = np.maximum(4.0 * (1.0 - self._app_prop), 1e-3)
        self._app_seconds = APP_MAX_SECONDS * rng.beta(a[:, None], b[:, None], size=(m, t))
        self._used = rng.random(size=(m, t)) < self._report_prop[:, None]
        grid = rng.choice(len(CANNABIS_GRAMS_GRID), size=(m, n_days), p=CANNABIS_GRAMS_PROBS)
        self._grams_daily = CANNABIS_GRAMS_GRID[grid]
        self._reward_u = rng.random(size=(m, t))

        self._rewards: list[list[int]] = [[] for _ in range(m)]
        self._recent_actions: list[list[int]] = [[] for _ in range(m)]

    @property
    def n_users(self) -> int:
        return len(self.population.user_models)

    def _base_features(self, user: int, t: int) -> np.ndarray:
        day = t // 2
        evening = t % 2
        split = EVENING_SPLIT if evening else MORNING_SPLIT
        grams = (
            self._grams_daily[user, day] * split * USE_UPSCALE
            if self._used[user, t]
            else 0.0
        )
        weekend = 1.0 if (self.cfg.start_day + day) % 7 >= 5 else 0.0
        return np.array(
            [
                1.0,
                float(self._survey[user, t]),
                normalize_app_seconds(self._app_seconds[user, t]),
                normalize_cannabis(grams),
                weekend,
                normalize_day(day + 1),
            ]
        )

    def rl_state(self, user: int, t: int) -> StateTriple:
        """Context communicated to the algorithm at decision point t (0-indexed)."""
        if t == 0:
            return initial_state()
        rewards = self._rewards[user]
        if len(rewards) != t:
            raise RuntimeError(f"user {user} has {len(rewards)} rewards before step {t}")
        engaged = int(np.mean(rewards[-3:]) >= 2.0)
        prev = rewards[-1]
        if prev >= 2:  # the self-report at t-1 was completed
            no_use = 0 if self._used[user, t - 1] else 1
        else:
            no_use = 0
        return StateTriple(engaged, t % 2, no_use)

    def dosage(self, user: int) -> float:
        if not self.population.user_models[user].has_habituation:
            return 0.0
        return compute_dosage(self._recent_actions[user])

    def step(self, user: int, t: int, action: int) -> int:
        """Sample the reward for (user, t, action) and advance the user's history."""
        model = self.population.user_models[user]
        dose = self.dosage(user)
        reward = sample_reward(
            model, self._base_features(user, t), action, dose, u=self._reward_u[user, t]
        )
        recent = self._recent_actions[user]
        recent.insert(0, int(action))
        del recent[DOSAGE_LOOKBACK:]
        self._rewards[user].append(reward)
        return reward
