"""Decision model: a per-segment Q network trained on recorded transitions.

One small network is shared by all segments.  Its input is the agent state
row ``[h, y_hat, u, b]`` and its two outputs are the values of labeling and
of skipping.  Training uses one-step targets from a periodically refreshed
copy of the network and a FIFO replay store.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .env import LABEL, SKIP, BudgetLedger, HoldoutEvaluator, Policy, StreamConfig, run_stream
from .errors import ConfigError, DimensionError
from .model import PredictiveModel, load_params, save_params
from .numerics import Adam, ParamStore, RngStreams, init_uniform

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    gamma: float = 0.8
    epsilon: float = 0.005
    batch_size: int = 64
    target_refresh: int = 200
    capacity: int = 50_000
    lr: float = 1e-3
    hidden: int = 32
    updates_per_step: int = 4
    reward_norm: bool = True
    reward_bins: int = 1  # >1 normalizes per remaining-budget stage
    clip: float = 5.0
    pace: bool = False  # causal advantage-quantile pacing instead of plain argmax

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.batch_size < 1 or self.capacity < 1 or self.target_refresh < 1:
            raise ConfigError("batch size, capacity and refresh interval must be positive")


class QNet:
    """``(H+3) -> hidden (tanh) -> 2`` network; output column 0 is label, 1 is skip."""

    def __init__(self, n_inputs: int, hidden: int = 32, seed: int = 0, zero_output: bool = False):
        self.n_inputs = int(n_inputs)
        self.hidden = int(hidden)
        rng = RngStreams(seed).fresh("qnet-init")
        self.params = ParamStore()
        self.params.add("W1", init_uniform(rng, (hidden, n_inputs), n_inputs))
        self.params.add("b1", np.zeros(hidden))
        W2 = np.zeros((2, hidden)) if zero_output else init_uniform(rng, (2, hidden), hidden)
        self.params.add("W2", W2)
        self.params.add("b2", np.zeros(2))

    def copy(self) -> "QNet":
        out = QNet.__new__(QNet)
        out.n_inputs, out.hidden = self.n_inputs, self.hidden
        out.params = self.params.copy()
        return out

    def _check(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=np.float64)
        if S.ndim == 1:
            S = S[None, :]
        if S.ndim != 2 or S.shape[1] != self.n_inputs:
            raise DimensionError(f"state rows must have length {self.n_inputs}, got shape {S.shape}")
        return S

    def forward(self, S):
        S = self._check(S)
        p = self.params
        A = np.tanh(S @ p["W1"].T + p["b1"])
        return A @ p["W2"].T + p["b2"], A

    def __call__(self, S) -> np.ndarray:
        return self.forward(S)[0]

    def backward(self, S, A, dQ) -> None:
        """Accumulate gradients of ``sum(dQ * Q)`` into the store."""
        p, g = self.params, self.params.grads
        g["W2"] += dQ.T @ A
        g["b2"] += dQ.sum(axis=0)
        dZ = (dQ @ p["W2"]) * (1.0 - A * A)
        g["W1"] += dZ.T @ S
        g["b1"] += dZ.sum(axis=0)

    def save(self, path, meta: dict | None = None) -> None:
        save_params(path, self.params, "qnet", {"n_inputs": self.n_inputs, "hidden": self.hidden, **(meta or {})})

    @classmethod
    def load(cls, path) -> "QNet":
        store, doc = load_params(path, "qnet")
        meta = doc["meta"]
        net = cls(meta["n_inputs"], meta["hidden"])
        net.params.load(store)
        return net


def q_values(qnet: QNet, s) -> np.ndarray:
    """``(Q_label, Q_skip)`` for one state row, or an ``(M, 2)`` array for many."""
    q = qnet(s)
    return q[0] if np.ndim(s) == 1 else q


def greedy_label(Q, margin: float = 0.0) -> np.ndarray:
    # strict: exact ties skip
    return Q[:, LABEL] - Q[:, SKIP] > margin if margin else Q[:, LABEL] > Q[:, SKIP]


def select_actions(qnet: QNet, S, rng: np.random.Generator | None, epsilon: float, eligible,
                   margin: float = 0.0) -> np.ndarray:
    """One-hot ``N x 2`` actions: epsilon-random among eligible rows, else greedy.

    With a non-zero ``margin`` a row labels only when ``Q_label - Q_skip``
    exceeds it; zero is the plain argmax.
    """
    Q = qnet(S)
    return _actions_from_q(Q, rng, epsilon, eligible, margin)


def _actions_from_q(Q, rng, epsilon, eligible, margin=0.0) -> np.ndarray:
    eligible = np.asarray(eligible, dtype=bool)
    label = greedy_label(Q, margin) & eligible
    if epsilon > 0:
        if rng is None:
            raise ConfigError("exploration needs a random generator")
        explore = (rng.random(len(Q)) < epsilon) & eligible
        coin = rng.random(len(Q)) < 0.5
        label = np.where(explore, coin, label)
    A = np.zeros((len(Q), 2), dtype=np.int8)
    A[label, LABEL] = 1
    A[~label, SKIP] = 1
    return A


class TransitionSet:
    """FIFO replay store over per-segment transitions."""

    def __init__(self, n_inputs: int, capacity: int = 50_000):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, n_inputs))
        self.s2 = np.zeros((capacity, n_inputs))
        self.a = np.zeros(capacity, dtype=np.int8)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0
        self.added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        k = self.head
        self.s[k], self.a[k], self.r[k], self.s2[k], self.done[k] = s, a, r, s2, done
        self.head = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.added += 1

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.add(tr.state, tr.action, tr.reward, tr.next_state, tr.terminal)

    def sample(self, k: int, rng: np.random.Generator):
        idx = rng.choice(self.size, size=min(k, self.size), replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def all(self):
        n = self.size
        return self.s[:n], self.a[:n], self.r[:n], self.s2[:n], self.done[:n]


class RunningStats:
    """Welford mean and population std of label-step rewards."""

    def __init__(self):
        self.n, self.mean, self._m2 = 0, 0.0, 0.0

    def push(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self._m2 += d * (x - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(self._m2 / self.n)) if self.n > 1 else 0.0

    def z(self, r):
        return (r - self.mean) / self.std if self.n > 1 and self.std > 1e-12 else r - self.mean


class RewardScaler:
    """z-scores label rewards against statistics of the same budget stage.

    Rewards early in a pass are large simply because the predictive model is
    still fresh.  Binning by the remaining-budget fraction (the last state
    column) removes that trend so the network ranks states rather than
    stages.  Bins with fewer than ``min_count`` rewards fall back to the
    pooled statistics.  Skip rows always score 0.
    """

    def __init__(self, bins: int = 10, min_count: int = 5):
        self.bins = int(bins)
        self.min_count = min_count
        self.pooled = RunningStats()
        self.by_bin = [RunningStats() for _ in range(self.bins)]

    def _bin(self, b):
        return np.minimum((np.asarray(b) * self.bins).astype(int), self.bins - 1)

    def push(self, r: float, b: float) -> None:
        self.pooled.push(r)
        self.by_bin[int(self._bin(b))].push(r)

    def normalize(self, r, actions, b):
        out = np.zeros_like(r, dtype=np.float64)
        for k in np.flatnonzero(actions == LABEL):
            st = self.by_bin[int(self._bin(b[k]))]
            out[k] = (st if st.n >= self.min_count else self.pooled).z(r[k])
        return out


def bellman_targets(batch, qnet_target: Callable, gamma: float) -> np.ndarray:
    """``r + gamma * max_a Q_target(s', a)``; terminal rows take ``r`` alone."""
    _, _, r, s2, done = batch
    r = np.asarray(r, dtype=np.float64)
    if len(r) == 0:
        raise ConfigError("empty batch")
    done = np.asarray(done, dtype=bool)
    y = r.copy()
    live = ~done
    if live.any():
        y[live] += gamma * np.max(qnet_target(np.asarray(s2)[live]), axis=1)
    return y


@dataclass
class Agent:
    """Q network, its target copy, replay store and optimizer."""

    n_inputs: int
    config: AgentConfig = field(default_factory=AgentConfig)
    seed: int = 0

    def __post_init__(self):
        self.config.validate()
        self.qnet = QNet(self.n_inputs, self.config.hidden, self.seed)
        self.target = self.qnet.copy()
        self.buffer = TransitionSet(self.n_inputs, self.config.capacity)
        self.optimizer = Adam(lr=self.config.lr)
        self.stats = RewardScaler(self.config.reward_bins)
        streams = RngStreams(self.seed)
        self.sample_rng = streams.fresh("qnet-replay")
        self.explore_rng = streams.fresh("qnet-explore")
        self.n_updates = 0
        self.margin = 0.0

    def refresh_target(self) -> None:
        self.target.params.load(self.qnet.params)


def update_decision_model(agent: Agent, n_updates: Optional[int] = None) -> Optional[float]:
    """Mini-batch steps on the squared Bellman error; ``None`` when the store is empty."""
    cfg = agent.config
    if len(agent.buffer) == 0:
        return None
    loss = None
    for _ in range(cfg.updates_per_step if n_updates is None else n_updates):
        s, a, r, s2, done = agent.buffer.sample(cfg.batch_size, agent.sample_rng)
        if cfg.reward_norm:
            r = agent.stats.normalize(r, a, s[:, -1])
        y = bellman_targets((s, a, r, s2, done), agent.target, cfg.gamma)
        Q, H = agent.qnet.forward(s)
        rows = np.arange(len(a))
        err = Q[rows, a] - y
        loss = float(np.mean(err * err))
        dQ = np.zeros_like(Q)
        dQ[rows, a] = 2.0 * err / len(a)
        agent.qnet.params.zero_grad()
        agent.qnet.backward(s, H, dQ)
        agent.qnet.params.clip_grads(cfg.clip)
        agent.optimizer.step(agent.qnet.params)
        agent.n_updates += 1
        if agent.n_updates % cfg.target_refresh == 0:
            agent.refresh_target()
    return loss


class Pacer:
    """Causal label threshold: the ``1 - rate`` quantile of advantages seen so far.

    Until ``warmup`` eligible rows have been seen the fixed ``initial``
    threshold applies.
    """

    def __init__(self, rate: float, initial: float = 0.0, warmup: int = 50):
        if not 0.0 < rate <= 1.0:
            raise ConfigError("pacing rate must lie in (0, 1]")
        self.rate, self.initial, self.warmup = float(rate), float(initial), int(warmup)
        self.history = []

    def threshold(self) -> float:
        if len(self.history) < self.warmup:
            return self.initial
        return float(np.quantile(self.history, 1.0 - self.rate))

    def observe(self, adv) -> None:
        self.history.extend(np.asarray(adv, dtype=float).tolist())


class GRRealPolicy(Policy):
    """Q policy; explores and learns only while ``training`` is set.

    With ``rate`` given, a row labels when its advantage beats the causal
    :class:`Pacer` threshold, so the budget is spent at roughly ``rate`` of
    eligible rows.  Without it the plain argmax (shifted by the agent
    margin) decides.
    """

    def __init__(self, agent: Agent, training: bool = True, rate: Optional[float] = None):
        self.agent = agent
        self.training = training
        self.pacer = Pacer(rate, agent.margin) if rate is not None else None
        self.seen = []  # states of eligible rows, for margin calibration

    @property
    def learning(self):
        return self.training

    def select(self, S, eligible, t, ctx):
        eligible = np.asarray(eligible, dtype=bool)
        Q = self.agent.qnet(S)
        adv = Q[:, LABEL] - Q[:, SKIP]
        eps = self.agent.config.epsilon if self.training else 0.0
        if self.training:
            self.seen.append(S[eligible])
        margin = self.agent.margin if self.pacer is None else self.pacer.threshold()
        A = _actions_from_q(Q, self.agent.explore_rng, eps, eligible, margin)
        if self.pacer is not None:
            self.pacer.observe(adv[eligible])
        return A[:, LABEL] == 1, adv

    def observe(self, transitions):
        agent = self.agent
        agent.buffer.extend(transitions)
        for tr in transitions:
            if tr.action == LABEL:
                agent.stats.push(tr.reward, tr.state[-1])
                break  # one step reward per day, shared by its label rows
        update_decision_model(agent)


@dataclass
class TrainReport:
    pass_rmse: list
    pass_granted: list
    logs: list


def pace_margin(agent: Agent, states, budget: float, pool: int) -> float:
    """Advantage quantile that labels ``budget`` of ``pool`` eligible rows.

    ``states`` are eligible rows met during a pass; their advantage under
    the current network is ranked and the ``1 - budget/pool`` quantile
    returned.
    """
    if len(states) == 0 or pool <= 0:
        return 0.0
    Q = agent.qnet(states)
    adv = Q[:, LABEL] - Q[:, SKIP]
    rate = min(1.0, budget / pool)
    return float(np.quantile(adv, 1.0 - rate)) if rate < 1.0 else float(adv.min())


def multi_pass_train(agent: Agent, model_factory: Callable[[], PredictiveModel], data, train_period,
                     holdout: HoldoutEvaluator, budget: int, passes: int,
                     stream: StreamConfig | None = None, rng_streams: RngStreams | None = None,
                     years: Optional[int] = None) -> TrainReport:
    """Repeated exploring passes over the training period with fresh predictive models."""
    streams = rng_streams or RngStreams(agent.seed)
    t0, t1 = train_period
    n_years = years or max(1, round((t1 - t0) / 365.25))
    report = TrainReport([], [], [])
    pool = int(data.observed[:, t0:t1].sum())
    for k in range(int(passes)):
        model = model_factory()
        ledger = BudgetLedger.for_period(budget, n_years)
        rate = min(1.0, budget / max(pool, 1)) if agent.config.pace else None
        policy = GRRealPolicy(agent, training=True, rate=rate)
        res = run_stream(model, policy, data, train_period, ledger, "train",
                         holdout, stream, streams.fresh(f"train-pass-{k}"))
        if agent.config.pace and policy.seen:
            agent.margin = pace_margin(agent, np.concatenate(policy.seen), budget, pool)
        report.pass_rmse.append(res.rmse_final)
        report.pass_granted.append(ledger.n_granted)
        report.logs.append(list(ledger.log))
        log.info("pass %d: %d labels, hold-out rmse %.4f", k, ledger.n_granted, res.rmse_final)
    return report


def pretrain_policy(agent: Agent, model_factory, sim_data, train_period, holdout_period, budget: int,
                    epochs: int, stream: StreamConfig | None = None, holdout_fraction: float = 0.25,
                    seed: int = 0) -> TrainReport:
    """Run the training loop against dense simulated labels."""
    if epochs <= 0:
        return TrainReport([], [], [])
    streams = RngStreams(seed).child("pretrain")
    holdout = HoldoutEvaluator(sim_data, holdout_period, holdout_fraction, streams.fresh("holdout"))
    return multi_pass_train(agent, model_factory, sim_data, train_period, holdout, budget, epochs,
                            stream, streams)


def save_agent(path, agent: Agent) -> None:
    agent.qnet.save(path, {"config": asdict(agent.config), "seed": agent.seed, "margin": agent.margin})


def load_agent(path, config: AgentConfig | None = None, seed: int | None = None) -> Agent:
    store, doc = load_params(path, "qnet")
    meta = doc["meta"]
    cfg = config or AgentConfig(**meta.get("config", {}))
    agent = Agent(meta["n_inputs"], cfg, meta.get("seed", 0) if seed is None else seed)
    if agent.qnet.hidden != meta["hidden"]:
        raise DimensionError("checkpoint hidden width differs from the agent configuration")
    agent.qnet.params.load(store)
    agent.refresh_target()
    agent.margin = float(meta.get("margin", 0.0))
    return agent
