"""Streaming active-learning environment.

One call to :func:`run_stream` walks a period day by day: the predictive
model embeds the day, a policy decides which segments to label, the budget
ledger grants what it can, the model is fine-tuned on the labeled set and
the hold-out RMSE change becomes the reward.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .model import NetState, PredictiveModel, mc_dropout_step, train_update

log = logging.getLogger(__name__)

LABEL, SKIP = 0, 1


def yearly_limit(budget: int, years: int) -> int:
    return int(np.floor(1.2 * budget / years))


@dataclass
class BudgetLedger:
    initial: int
    yearly_limit: Optional[int] = None
    remaining: int = field(init=False)
    per_year: dict = field(default_factory=dict)
    log: list = field(default_factory=list)  # (day, segment, granted, reason)

    def __post_init__(self):
        if self.initial < 0:
            raise ConfigError("budget must be non-negative")
        self.remaining = int(self.initial)

    @classmethod
    def for_period(cls, budget: int, years: int) -> "BudgetLedger":
        return cls(int(budget), yearly_limit(budget, years))

    @property
    def fraction(self) -> float:
        return self.remaining / self.initial if self.initial > 0 else 0.0

    @property
    def n_granted(self) -> int:
        return self.initial - self.remaining

    def year_room(self, year) -> int:
        room = self.remaining
        if self.yearly_limit is not None:
            room = min(room, self.yearly_limit - self.per_year.get(int(year), 0))
        return max(room, 0)

    def grant(self, day: int, segment: int, year) -> None:
        if self.year_room(year) <= 0:
            raise ConfigError("grant beyond budget or yearly limit")
        self.remaining -= 1
        self.per_year[int(year)] = self.per_year.get(int(year), 0) + 1
        self.log.append((int(day), int(segment), True, "granted"))

    def refuse(self, day: int, segment: int, reason: str) -> None:
        self.log.append((int(day), int(segment), False, reason))

    def labeled(self):
        return [(d, s) for d, s, ok, _ in self.log if ok]


def make_state(h, y_hat, u, ledger: BudgetLedger) -> np.ndarray:
    """Rows ``[h_i, y_hat_i, u_i, remaining/initial]`` in segment order."""
    h = np.asarray(h, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if h.ndim != 2 or y_hat.shape != (h.shape[0],) or u.shape != (h.shape[0],):
        raise DimensionError("h must be (N, H) with y_hat and u of length N")
    b = np.full((h.shape[0], 1), ledger.fraction)
    return np.concatenate([h, y_hat[:, None], u[:, None], b], axis=1)


def apply_actions(actions, ledger: BudgetLedger, available, day: int, year, advantage=None):
    """Grant label requests in ``actions`` (``N x 2`` one-hot) that the ledger allows.

    A request is granted when an observation is available, budget remains
    and the yearly cap is not reached.  When requests outnumber the room
    left, rows with the largest ``advantage`` win (ties: lower index).
    """
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape[1] != 2 or np.any(actions.sum(axis=1) != 1):
        raise DimensionError("actions must be one-hot rows of length 2")
    want = actions[:, LABEL] == 1
    available = np.asarray(available, dtype=bool)
    granted = np.zeros(len(want), dtype=bool)
    rows = np.flatnonzero(want)
    for i in rows[~available[rows]]:
        ledger.refuse(day, i, "no-observation")
    rows = rows[available[rows]]
    if advantage is not None and len(rows) > 1:
        adv = np.asarray(advantage, dtype=np.float64)[rows]
        rows = rows[np.lexsort((rows, -adv))]
    for i in rows:
        if ledger.remaining <= 0:
            ledger.refuse(day, i, "budget")
        elif ledger.year_room(year) <= 0:
            ledger.refuse(day, i, "yearly-limit")
        else:
            ledger.grant(day, i, year)
            granted[i] = True
    return granted


def to_actions(label_rows) -> np.ndarray:
    label_rows = np.asarray(label_rows, dtype=bool)
    A = np.zeros((len(label_rows), 2), dtype=np.int8)
    A[label_rows, LABEL] = 1
    A[~label_rows, SKIP] = 1
    return A


class HoldoutEvaluator:
    """RMSE (original units) on a fixed subsample of one period's labels."""

    def __init__(self, data, period, fraction: float = 0.25, rng=None, warmup: int = 60):
        t0, t1 = period
        if not (0 <= t0 < t1 <= data.T):
            raise ConfigError("hold-out period outside data")
        self.data = data
        self.t0, self.t1 = t0, t1
        self.start = max(0, t0 - warmup)
        obs = data.observed[:, t0:t1]
        keys = np.argwhere(obs)
        if len(keys) == 0:
            raise ConfigError("hold-out period has no labels")
        if fraction < 1.0:
            k = max(1, int(round(fraction * len(keys))))
            pick = np.sort((rng or np.random.default_rng(0)).choice(len(keys), size=k, replace=False))
            keys = keys[pick]
        self.keys = keys
        self.targets = data.labels[:, t0:t1][keys[:, 0], keys[:, 1]]

    def __call__(self, model: PredictiveModel) -> float:
        y, _, _, _ = model.run(self.data.X[self.start:self.t1])
        pred = y[self.t0 - self.start:].T[self.keys[:, 0], self.keys[:, 1]]
        return float(np.sqrt(np.mean((pred - self.targets) ** 2))) * self.data.target_std


def reward(model_before, model_after, holdout: HoldoutEvaluator) -> float:
    """Hold-out RMSE reduction; positive means the update helped."""
    if model_before is model_after:
        return 0.0
    return holdout(model_before) - holdout(model_after)


@dataclass
class Transition:
    state: np.ndarray  # s_i^t
    action: int  # LABEL or SKIP
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class StreamConfig:
    mc_samples: int = 10
    dropout: float = 0.2
    finetune_steps: int = 5
    finetune_window: int = 365
    replay: bool = True  # labels only where an observation exists
    clip: float = 5.0


@dataclass
class StreamResult:
    transitions: list
    metrics: list
    ledger: BudgetLedger
    labeled: np.ndarray  # (N, T) bool
    rewards: list
    rmse_initial: Optional[float]
    rmse_final: Optional[float]
    state: NetState


class Policy:
    """Interface for labeling policies used inside the stream."""

    learning = False

    def select(self, S, eligible, t, ctx):
        """Return ``(label_rows, advantage)``; both length N."""
        raise NotImplementedError

    def observe(self, transitions):
        pass


class NeverLabel(Policy):
    def select(self, S, eligible, t, ctx):
        return np.zeros(len(S), dtype=bool), np.zeros(len(S))


class ScriptedPolicy(Policy):
    """Label exactly the given (day -> rows) plan; used for hand-traced runs."""

    def __init__(self, plan):
        self.plan = {int(k): list(v) for k, v in plan.items()}

    def select(self, S, eligible, t, ctx):
        rows = np.zeros(len(S), dtype=bool)
        rows[self.plan.get(int(t), [])] = True
        return rows, np.zeros(len(S))


def run_stream(model: PredictiveModel, policy: Policy, data, period, ledger: BudgetLedger,
               mode: str = "train", holdout: Optional[HoldoutEvaluator] = None,
               config: StreamConfig | None = None, rng: np.random.Generator | None = None,
               state: NetState | None = None, labeled: np.ndarray | None = None) -> StreamResult:
    """Walk ``period`` once, labeling through ``policy`` and fine-tuning ``model``."""
    if mode not in ("train", "test"):
        raise ConfigError(f"mode must be 'train' or 'test', got {mode!r}")
    cfg = config or StreamConfig()
    t0, t1 = period
    if not (0 <= t0 < t1 <= data.T):
        raise ConfigError(f"period {period} outside data of {data.T} days")
    rng = rng if rng is not None else np.random.default_rng(0)
    years = data.water_year()
    observed = data.observed
    labeled = np.zeros((data.n, data.T), dtype=bool) if labeled is None else labeled
    carried = state or NetState.zeros(model.n, model.H)
    history_h = np.zeros((t1 - t0, model.n, model.H))
    history_c = np.zeros((t1 - t0, model.n, model.H))

    transitions, metrics, rewards = [], [], []
    rmse_now = holdout(model) if holdout is not None else None
    rmse_initial = rmse_now
    pending = None

    def flush(next_S, terminal):
        S, A, R = pending
        batch = [Transition(S[i], int(A[i, SKIP]), R if A[i, LABEL] else 0.0,
                            next_S[i] if next_S is not None else S[i], terminal)
                 for i in range(len(S))]
        transitions.extend(batch)
        if mode == "train" and policy.learning:
            policy.observe(batch)

    for t in range(t0, t1):
        if ledger.remaining <= 0:
            break
        history_h[t - t0] = carried.h
        history_c[t - t0] = carried.c
        packed = model._packed()
        new_state, _ = model.step(carried, data.X[t], packed=packed)
        y_mean, u = mc_dropout_step(model, carried, data.X[t], cfg.mc_samples, cfg.dropout, rng)
        S = make_state(new_state.h, y_mean, u, ledger)
        if pending is not None:
            flush(S, False)

        room = ledger.year_room(years[t])
        eligible = np.full(model.n, room > 0)
        if cfg.replay:
            eligible &= observed[:, t]
        ctx = {"u": u, "y_hat": y_mean, "h": new_state.h, "mode": mode, "year": years[t]}
        want, adv = policy.select(S, eligible, t, ctx)
        A_req = to_actions(want)
        granted = apply_actions(A_req, ledger, eligible if cfg.replay else np.ones(model.n, bool),
                                t, years[t], adv)
        R = 0.0
        if granted.any():
            labeled[granted, t] = True
            lo = max(t0, t - cfg.finetune_window + 1)
            days = np.flatnonzero(labeled[:, lo:t + 1].any(axis=0))
            s = lo + int(days[0])
            init = NetState(history_h[s - t0].copy(), history_c[s - t0].copy())
            train_update(model, data, labeled, epochs=cfg.finetune_steps, window=cfg.finetune_window,
                         t_range=(s, t + 1), init_state=init, clip=cfg.clip)
            if holdout is not None:
                after = holdout(model)
                R = rmse_now - after
                rmse_now = after
        rewards.append(R)
        pending = (S, to_actions(granted), R)
        metrics.append({
            "t": int(t),
            "date": str(data.dates[t]),
            "rmse_holdout": rmse_now,
            "remaining_budget": int(ledger.remaining),
            "n_granted": int(granted.sum()),
        })
        carried = new_state

    if pending is not None:
        flush(None, True)
    return StreamResult(transitions, metrics, ledger, labeled, rewards, rmse_initial, rmse_now, carried)


# ---------------------------------------------------------------------------
# output files


def write_labeled_log(path, ledger: BudgetLedger, data) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "segment_id", "granted", "reason"])
        for day, seg, ok, reason in ledger.log:
            w.writerow([str(data.dates[day]), data.segment_ids[seg], int(ok), reason])


def write_metrics(path, metrics) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
