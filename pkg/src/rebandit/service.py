"""HTTP decision service: per-request decisions, reward ingestion, batch updates.

State changes append to a JSON-lines event log (flushed and fsynced before any
response goes out) and each batch update also writes a full snapshot file, so
a crashed service rebuilds the exact posterior and random-stream position by
loading the latest snapshot and replaying the log tail.  Decisions read an
immutable posterior snapshot and never wait for an in-flight update.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np

from .agents import make_agent
from .empirical_bayes import OptimizerConfig
from .features import StateTriple
from .policy import GH_NODES_DEFAULT, SmoothingParams
from .posterior import SufficientStats
from .priors import default_hyperparams, default_prior
from .rng import philox_state_after, substream

ADMIN_TOKEN_ENV = "REBANDIT_ADMIN_TOKEN"


@dataclass(frozen=True)
class ServiceConfig:
    algorithm: str = "rebandit"
    max_users: int = 120
    seed: int = 0
    penalty_weight: float = 0.2
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    solver: str = "structured"
    gh_nodes: int = GH_NODES_DEFAULT

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceConfig":
        d = dict(d)
        if isinstance(d.get("smoothing"), dict):
            d["smoothing"] = SmoothingParams(**d["smoothing"])
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**d)


class ServiceError(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


class EventLog:
    """Append-only JSON-lines log; every append is flushed and fsynced."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8", newline="\n")

    def append(self, event: dict) -> None:
        self._fh.write(json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def read(path: str) -> list[dict]:
        if not os.path.exists(path):
            return []
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class Study:
    """The deployment state machine behind the HTTP surface."""

    def __init__(self, config: ServiceConfig, state_dir: str):
        self.config = config
        self.state_dir = state_dir
        os.makedirs(state_dir, exist_ok=True)
        self._lock = threading.RLock()
        self._update_lock = threading.Lock()
        self._users: dict[str, int] = {}
        self._t_counters: list[int] = []
        self._user_rewards: list[list[int]] = []
        self._pending: dict[int, dict] = {}
        self._next_decision = 0
        self._seq = 0
        self._draws = 0
        self._snapshot_seq = 0
        self.agent = make_agent(
            config.algorithm,
            config.max_users,
            default_prior(),
            default_hyperparams(),
            config.smoothing,
            config.penalty_weight,
            config.optimizer,
            config.solver,
            config.gh_nodes,
        )
        self._policy_rng = substream(config.seed, "service-policy")
        self._recover()
        self.log = EventLog(os.path.join(state_dir, "events.jsonl"))

    # ---- persistence -----------------------------------------------------

    @property
    def events_path(self) -> str:
        return os.path.join(self.state_dir, "events.jsonl")

    def _snapshot_path(self, seq: int) -> str:
        return os.path.join(self.state_dir, f"snapshot_{seq:08d}.json")

    def _latest_snapshot(self) -> dict | None:
        files = sorted(
            f for f in os.listdir(self.state_dir)
            if f.startswith("snapshot_") and f.endswith(".json")
        )
        if not files:
            return None
        with open(os.path.join(self.state_dir, files[-1]), encoding="utf-8") as fh:
            return json.load(fh)

    def _write_snapshot(self) -> None:
        self._snapshot_seq += 1
        payload = {
            "seq": self._seq,
            "users": self._users,
            "t_counters": self._t_counters,
            "user_rewards": self._user_rewards,
            "pending": {
                str(k): {**v, "state": list(v["state"])} for k, v in self._pending.items()
            },
            "next_decision": self._next_decision,
            "draws": self._draws,
            "noise_var": self._current_noise_var(),
            "re_var_diag": self._current_re_diag(),
            "reward_stats": self.agent.rewards.state(),
            "stats": self._stats_state(),
        }
        path = self._snapshot_path(self._snapshot_seq)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _current_noise_var(self) -> float:
        if self.config.algorithm == "rebandit":
            return float(self.agent.hyperparams.noise_var)
        if self.config.algorithm == "blr":
            return float(self.agent.state.noise_var)
        return 0.0

    def _current_re_diag(self) -> list[float]:
        if self.config.algorithm == "rebandit":
            return [float(v) for v in np.diag(self.agent.hyperparams.random_effects_cov)]
        return []

    def _stats_state(self) -> list[dict]:
        if self.config.algorithm == "rebandit":
            return [
                {
                    "gram": s.gram.tolist(),
                    "cross": s.cross.tolist(),
                    "count": s.count,
                    "sum_sq": s.sum_sq,
                }
                for s in self.agent.stats
            ]
        if self.config.algorithm == "blr":
            s = self.agent.state
            return [
                {
                    "gram": s.gram.tolist(),
                    "cross": s.cross.tolist(),
                    "count": s.count,
                    "sum_sq": s.sum_sq,
                }
            ]
        return []

    def _restore_stats(self, snap: dict) -> None:
        from .policy import RewardEngineering
        from .priors import HyperParams

        self.agent.rewards = RewardEngineering.from_state(
            self.config.penalty_weight, snap["reward_stats"]
        )
        if self.config.algorithm == "rebandit":
            for s, blob in zip(self.agent.stats, snap["stats"]):
                s.gram = np.array(blob["gram"])
                s.cross = np.array(blob["cross"])
                s.count = blob["count"]
                s.sum_sq = blob["sum_sq"]
            self.agent.hyperparams = HyperParams(
                noise_var=snap["noise_var"],
                random_effects_cov=np.diag(snap["re_var_diag"]),
            )
            self.agent.update_posterior()
        elif self.config.algorithm == "blr":
            blob = snap["stats"][0]
            st = self.agent.state
            st.gram = np.array(blob["gram"])
            st.cross = np.array(blob["cross"])
            st.count = blob["count"]
            st.sum_sq = blob["sum_sq"]
            st.noise_var = snap["noise_var"]
            self.agent.update_posterior()

    def _recover(self) -> None:
        events = EventLog.read(self.events_path)
        snap = self._latest_snapshot()
        start_seq = 0
        if snap is not None:
            self._users = dict(snap["users"])
            self._t_counters = list(snap["t_counters"])
            self._user_rewards = [list(r) for r in snap["user_rewards"]]
            self._pending = {
                int(k): {**v, "state": tuple(v["state"])} for k, v in snap["pending"].items()
            }
            self._next_decision = snap["next_decision"]
            self._draws = snap["draws"]
            self._seq = snap["seq"]
            self._restore_stats(snap)
            start_seq = snap["seq"]
        snapshots_on_disk = sum(
            1 for f in os.listdir(self.state_dir) if f.startswith("snapshot_")
        )
        self._snapshot_seq = snapshots_on_disk
        for event in events:
            if event["seq"] <= start_seq:
                continue
            self._apply(event)
        self._policy_rng = philox_state_after(
            self.config.seed, "service-policy", draws=self._draws
        )

    def _apply(self, event: dict) -> None:
        """Re-apply one logged event during recovery (no logging, no draws)."""
        kind = event["type"]
        self._seq = event["seq"]
        if kind == "register":
            self._users[event["external_key"]] = event["user"]
            while len(self._t_counters) <= event["user"]:
                self._t_counters.append(0)
                self._user_rewards.append([])
        elif kind == "decision":
            user = event["user"]
            self._pending[event["decision_id"]] = {
                "user": user,
                "state": tuple(event["state"]),
                "pi": event["pi"],
                "action": event["action"],
            }
            self._t_counters[user] += 1
            self._next_decision = event["decision_id"] + 1
            self._draws += 1
        elif kind == "reward":
            info = self._pending.pop(event["decision_id"])
            user = info["user"]
            self.agent.observe(
                user, StateTriple(*info["state"]), info["pi"], info["action"], event["raw"]
            )
            self._user_rewards[user].append(event["raw"])
        elif kind == "update":
            if event["kind"] == "weekly":
                self.agent.update_hyperparams()
            self.agent.update_posterior()

    # ---- request handlers ---------------------------------------------------

    def register(self, external_key: str) -> int:
        with self._lock:
            if external_key in self._users:
                return self._users[external_key]
            if len(self._users) >= self.config.max_users:
                raise ServiceError(409, "study is full")
            user = len(self._users)
            self._users[external_key] = user
            self._t_counters.append(0)
            self._user_rewards.append([])
            self._seq += 1
            self.log.append(
                {"seq": self._seq, "type": "register", "external_key": external_key, "user": user}
            )
            return user

    def _build_state(self, user: int, payload: dict) -> StateTriple:
        t = self._t_counters[user]
        if t == 0:
            return StateTriple(0, 0, 1)
        rewards = self._user_rewards[user][-3:]
        engaged = int(bool(rewards) and np.mean(rewards) >= 2.0)
        report = payload.get("cannabis_report")
        if not payload.get("survey_completed") or report is None:
            no_use = 0
        else:
            no_use = 0 if report.get("used") else 1
        return StateTriple(engaged, t % 2, no_use)

    def decide(self, user: int, payload: dict) -> dict:
        with self._lock:
            if user >= len(self._t_counters):
                raise ServiceError(404, f"unknown user {user}")
            state = self._build_state(user, payload)
            # The probability reads the current immutable posterior snapshot;
            # an in-flight update swaps a new one in without taking this lock.
            pi = self.agent.action_probability(user, state)
            draw = float(self._policy_rng.random())
            self._draws += 1
            action = int(draw < pi)
            decision_id = self._next_decision
            self._next_decision += 1
            self._t_counters[user] += 1
            self._pending[decision_id] = {
                "user": user, "state": tuple(state), "pi": pi, "action": action,
            }
            self._seq += 1
            # Durably logged before the response leaves the handler.
            self.log.append(
                {
                    "seq": self._seq,
                    "type": "decision",
                    "decision_id": decision_id,
                    "user": user,
                    "t": self._t_counters[user] - 1,
                    "state": list(state),
                    "pi": pi,
                    "action": action,
                    "draw": draw,
                    "payload": payload,
                }
            )
        return {"decision_id": decision_id, "action": action, "pi": pi}

    def report_reward(self, decision_id: int, reward: int) -> dict:
        with self._lock:
            if decision_id not in self._pending:
                if decision_id < self._next_decision:
                    raise ServiceError(409, f"decision {decision_id} already has a reward")
                raise ServiceError(404, f"unknown decision {decision_id}")
            info = self._pending.pop(decision_id)
            user = info["user"]
            engineered = self.agent.observe(
                user, StateTriple(*info["state"]), info["pi"], info["action"], reward
            )
            self._user_rewards[user].append(reward)
            self._seq += 1
            self.log.append(
                {
                    "seq": self._seq,
                    "type": "reward",
                    "decision_id": decision_id,
                    "user": user,
                    "raw": reward,
                    "engineered": engineered,
                }
            )
            return {"decision_id": decision_id, "engineered_reward": engineered}

    def run_update(self, kind: str) -> dict:
        # Heavy computation happens outside the request lock; only the final
        # bookkeeping below serializes with decisions and reward reports.
        with self._update_lock:
            before_noise = self._current_noise_var()
            fit = None
            if kind == "weekly":
                fit = self.agent.update_hyperparams()
            self.agent.update_posterior()
        with self._lock:
            report = {
                "kind": kind,
                "noise_var_before": before_noise,
                "noise_var": self._current_noise_var(),
                "re_var_diag": self._current_re_diag(),
                "n_rewards": sum(len(r) for r in self._user_rewards),
            }
            if fit is not None:
                report["converged"] = bool(fit.converged)
                report["objective"] = fit.objective_trace[-1] if fit.objective_trace else None
            self._seq += 1
            self.log.append({"seq": self._seq, "type": "update", "kind": kind, "report": report})
            self._write_snapshot()
        return report

    def posterior_mean(self) -> np.ndarray:
        if self.config.algorithm == "rebandit":
            return self.agent.snapshot.mean.copy()
        if self.config.algorithm == "blr":
            return self.agent.state.mean.copy()
        return np.zeros(0)

    def close(self) -> None:
        self.log.close()


def verify_service_log(state_dir: str, config: ServiceConfig) -> dict:
    """Rebuild a study from its log, recomputing every decision along the way."""
    events = EventLog.read(os.path.join(state_dir, "events.jsonl"))
    agent = make_agent(
        config.algorithm,
        config.max_users,
        default_prior(),
        default_hyperparams(),
        config.smoothing,
        config.penalty_weight,
        config.optimizer,
        config.solver,
        config.gh_nodes,
    )
    pending: dict[int, dict] = {}
    n = pi_bad = act_bad = 0
    max_diff = 0.0
    for event in events:
        kind = event["type"]
        if kind == "decision":
            state = StateTriple(*event["state"])
            pi = agent.action_probability(event["user"], state)
            action = int(event["draw"] < pi)
            n += 1
            max_diff = max(max_diff, abs(pi - event["pi"]))
            if pi != event["pi"]:
                pi_bad += 1
            if action != event["action"]:
                act_bad += 1
            pending[event["decision_id"]] = {
                "user": event["user"], "state": state, "pi": pi, "action": action,
            }
        elif kind == "reward":
            info = pending.pop(event["decision_id"])
            agent.observe(info["user"], info["state"], info["pi"], info["action"], event["raw"])
        elif kind == "update":
            if event["kind"] == "weekly":
                agent.update_hyperparams()
            agent.update_posterior()
    return {
        "n_decisions": n,
        "pi_mismatches": pi_bad,
        "action_mismatches": act_bad,
        "max_pi_diff": max_diff,
    }


# ---- HTTP surface -------------------------------------------------------------


from pydantic import BaseModel, Field


class RegisterRequest(BaseModel):
    external_key: str = Field(min_length=1)


class CannabisReport(BaseModel):
    used: bool


class DecisionRequest(BaseModel):
    user: int
    survey_completed: bool = False
    app_used: bool = False
    activity_answer: Optional[bool] = None
    cannabis_report: Optional[CannabisReport] = None


class RewardRequest(BaseModel):
    decision_id: int
    reward: Literal[0, 1, 2, 3]


class UpdateRequest(BaseModel):
    kind: Literal["nightly", "weekly"]


def create_app(config: ServiceConfig, state_dir: str, admin_token: str | None = None):
    from fastapi import FastAPI, Header, HTTPException

    app = FastAPI(title="decision service")
    study = Study(config, state_dir)
    app.state.study = study
    token = admin_token if admin_token is not None else os.environ.get(ADMIN_TOKEN_ENV)

    def _translate(exc: ServiceError) -> HTTPException:
        return HTTPException(status_code=exc.status, detail=exc.detail)

    @app.post("/users")
    def register(req: RegisterRequest):
        try:
            return {"user": study.register(req.external_key)}
        except ServiceError as exc:
            raise _translate(exc)

    @app.post("/decision")
    def decision(req: DecisionRequest):
        payload = req.model_dump()
        user = payload.pop("user")
        try:
            return study.decide(user, payload)
        except ServiceError as exc:
            raise _translate(exc)

    @app.post("/reward")
    def reward(req: RewardRequest):
        try:
            return study.report_reward(req.decision_id, req.reward)
        except ServiceError as exc:
            raise _translate(exc)

    @app.post("/admin/update")
    def admin_update(req: UpdateRequest, x_admin_token: str | None = Header(default=None)):
        if token is None or x_admin_token != token:
            raise HTTPException(status_code=401, detail="admin token missing or wrong")
        return study.run_update(req.kind)

    return app
