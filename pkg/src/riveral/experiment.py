"""Experiment configuration, CSV ingestion, orchestration and result files.

A run follows four chronologically ordered periods: training (decision
model passes), hold-out (rewards), test (one frozen pass that collects
labels) and evaluation (RMSE only).  Evaluation labels are hidden from every
stage except the final score.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import Agent, AgentConfig, GRRealPolicy, load_agent, multi_pass_train, pretrain_policy
from .baselines import (RandomStreamPolicy, ScoreRecorder, ThresholdCalib, UDCPolicy, UncertaintyPolicy,
                        calibrate_threshold, random_pool_select, udc_scores)
from .data import TARGET_KINDS, PanelData, standardize
from .env import (BudgetLedger, HoldoutEvaluator, StreamConfig, run_stream, write_labeled_log,
                  write_metrics)
from .errors import ConfigError, DataError, RiveralError, UnknownSegmentError
from .graph import VARIANTS, build_graph, node_stats, read_edges_csv
from .model import NetState, PredictiveModel, train_update
from .numerics import RngStreams
from .synth import FEATURES, SynthConfig, generate_basin, simulate_physics

log = logging.getLogger(__name__)

POLICIES = ("grreal", "random", "uncertainty", "udc")
PERIODS = ("train", "holdout", "test", "eval")
MAX_FILL_DAYS = 3


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Every knob of one run.  JSON keys match the field names."""

    # data: CSV paths, or a synthetic basin when ``features_csv`` is empty
    features_csv: Optional[str] = None
    observations_csv: Optional[str] = None
    edges_csv: Optional[str] = None
    synth: dict = field(default_factory=lambda: {
        "n_segments": 12, "noise": 0.3, "advection": 0.5, "max_in_degree": 2,
        "obs_fraction": [0.02, 0.2], "start": "1980-10-01"})
    target: str = "temperature"
    # periods: explicit {"train": [start, end), ...} ISO dates, else consecutive windows
    periods: Optional[dict] = None
    period_years: Optional[int] = None  # default 9 for CSV data, 4 for synthetic
    # labeling
    policy: str = "grreal"
    budget: Optional[int] = None
    budget_fraction: float = 0.05  # of the test-period pool, used when budget is None
    udc_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    calib_rounds: int = 2  # threshold refits after the random replay
    # predictive model
    graph_variant: str = "downstream"
    hidden: int = 20
    lr: float = 3e-3
    dropout: float = 0.2
    mc_samples: int = 10
    finetune_steps: int = 5
    finetune_window: int = 365
    holdout_fraction: float = 0.25
    warmup_days: int = 60
    final_epochs: int = 50
    final_init: str = "carried"  # or "fresh"
    # decision model
    gamma: float = 0.8
    epsilon: float = 0.005
    q_lr: float = 1e-3
    q_hidden: int = 32
    batch_size: int = 64
    target_refresh: int = 200
    capacity: int = 50_000
    passes: int = 3
    q_updates_per_step: int = 4
    pace: bool = False
    reward_bins: int = 1
    train_label_fraction: float = 1.0
    pretrain_passes: int = 0  # policy pretraining on simulated data
    pretrain_predictive: bool = False
    pretrain_epochs: int = 20
    sim_bias: float = 0.25
    pretrained: Optional[str] = None  # decision-model checkpoint
    seed: int = 0
    output_dir: Optional[str] = None

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.graph_variant not in VARIANTS:
            raise ConfigError(f"graph variant must be one of {VARIANTS}")
        if self.target not in TARGET_KINDS:
            raise ConfigError(f"target must be one of {TARGET_KINDS}")
        if self.budget is not None and self.budget <= 0:
            raise ConfigError("budget must be positive")
        if self.budget is None and not 0.0 < self.budget_fraction <= 1.0:
            raise ConfigError("budget fraction must lie in (0, 1]")
        if not 0.0 < self.train_label_fraction <= 1.0:
            raise ConfigError("train label fraction must lie in (0, 1]")
        if self.final_init not in ("carried", "fresh"):
            raise ConfigError("final_init must be 'carried' or 'fresh'")
        if not 0.0 < self.holdout_fraction <= 1.0:
            raise ConfigError("hold-out fraction must lie in (0, 1]")
        if self.features_csv and not (self.observations_csv and self.edges_csv):
            raise ConfigError("CSV input needs features, observations and edges paths")
        w = np.asarray(self.udc_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ConfigError("udc_weights must be three non-negative numbers summing to 1")
        AgentConfig(**self.agent_kwargs()).validate()

    def agent_kwargs(self) -> dict:
        return dict(gamma=self.gamma, epsilon=self.epsilon, batch_size=self.batch_size,
                    target_refresh=self.target_refresh, capacity=self.capacity, lr=self.q_lr,
                    hidden=self.q_hidden, updates_per_step=self.q_updates_per_step, pace=self.pace,
                    reward_bins=self.reward_bins)

    def stream_config(self) -> StreamConfig:
        return StreamConfig(self.mc_samples, self.dropout, self.finetune_steps, self.finetune_window)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["udc_weights"] = list(self.udc_weights)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "udc_weights" in doc:
            doc["udc_weights"] = tuple(doc["udc_weights"])
        if "synth" in doc:
            doc["synth"] = {**cls().synth, **doc["synth"]}
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class RawPanel:
    segment_ids: tuple
    dates: np.ndarray
    features: np.ndarray  # (N, T, D) in original units
    labels: np.ndarray  # (N, T), NaN where unobserved
    feature_names: tuple

    def panel(self, target: str, fit: slice = slice(None), truth=None) -> PanelData:
        return standardize(self.segment_ids, self.dates, self.features, self.labels, target, fit,
                           raw_truth=truth, feature_names=self.feature_names)


def _parse_date(text, where):
    try:
        return np.datetime64(text.strip(), "D")
    except ValueError:
        raise DataError(f"{where}: bad date {text!r}") from None


def _parse_float(text, where):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None


def ingest(features_csv, observations_csv, edges_csv):
    """Read the three CSV inputs into ``(edges, RawPanel, report)``."""
    fpath, opath = Path(features_csv), Path(observations_csv)
    rows = {}
    order = []
    with fpath.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or [h.strip() for h in header[:2]] != ["date", "segment_id"]:
            raise DataError(f"{fpath}: header must start with date,segment_id")
        names = tuple(h.strip() for h in header[2:])
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{fpath}:{lineno}"
            if len(row) != len(header):
                raise DataError(f"{where}: expected {len(header)} columns, got {len(row)}")
            seg = row[1].strip()
            if seg not in rows:
                rows[seg] = {}
                order.append(seg)
            rows[seg][_parse_date(row[0], where)] = [_parse_float(v, where) for v in row[2:]]
    if not order:
        raise DataError(f"{fpath}: no feature rows")
    first = min(min(r) for r in rows.values())
    last = max(max(r) for r in rows.values())
    dates = np.arange(first, last + np.timedelta64(1, "D"), dtype="datetime64[D]")
    N, T, D = len(order), len(dates), len(names)
    feats = np.empty((N, T, D))
    filled = {}
    for i, seg in enumerate(order):
        have = rows[seg]
        gap = 0
        n_fill = 0
        for t, d in enumerate(dates):
            if d in have:
                feats[i, t] = have[d]
                gap = 0
                continue
            gap += 1
            if t == 0 or gap > MAX_FILL_DAYS:
                raise DataError(f"{fpath}: segment {seg} is missing features on {d} "
                                f"(gaps longer than {MAX_FILL_DAYS} days cannot be filled)")
            feats[i, t] = feats[i, t - 1]
            n_fill += 1
        filled[seg] = n_fill
    index = {s: i for i, s in enumerate(order)}

    sums = np.zeros((N, T))
    counts = np.zeros((N, T), dtype=int)
    with opath.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "segment_id", "value"]:
            raise DataError(f"{opath}: header must be date,segment_id,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{opath}:{lineno}"
            if len(row) != 3:
                raise DataError(f"{where}: expected 3 columns")
            if row[2].strip() == "":
                continue
            d = _parse_date(row[0], where)
            seg = row[1].strip()
            if seg not in index:
                raise UnknownSegmentError(f"{where}: unknown segment id {seg!r}")
            if not first <= d <= last:
                raise DataError(f"{where}: observation date {d} outside the feature range {first}..{last}")
            v = _parse_float(row[2], where)
            if not math.isfinite(v):
                raise DataError(f"{where}: non-finite observation")
            t = int((d - first).astype(int))
            sums[index[seg], t] += v
            counts[index[seg], t] += 1
    dups = int(np.sum(counts > 1))
    if dups:
        log.warning("%d duplicate (segment, day) observations averaged", dups)
    with np.errstate(invalid="ignore"):
        labels = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    edges = read_edges_csv(edges_csv)
    for a, b, _ in edges:
        for s in (a, b):
            if s not in index:
                raise UnknownSegmentError(f"{edges_csv}: edge references unknown segment {s!r}")

    report = {
        "segments": N,
        "days": T,
        "features": list(names),
        "first_date": str(first),
        "last_date": str(last),
        "edges": len(edges),
        "observations": int(np.isfinite(labels).sum()),
        "duplicates_averaged": dups,
        "coverage": {s: {"observations": int(np.isfinite(labels[i]).sum()),
                         "fraction": float(np.isfinite(labels[i]).mean()),
                         "forward_filled_days": filled[s]} for i, s in enumerate(order)},
    }
    return edges, RawPanel(tuple(order), dates, feats, labels, names), report


# ---------------------------------------------------------------------------
# periods


def default_periods(dates, years: int) -> dict:
    """Four consecutive windows of ``years`` water years from the first Oct 1."""
    first = dates[0]
    y = int(first.astype("datetime64[Y]").astype(int)) + 1970
    start = np.datetime64(f"{y}-10-01")
    if start < first:
        start = np.datetime64(f"{y + 1}-10-01")
    y0 = int(start.astype("datetime64[Y]").astype(int)) + 1970
    out = {}
    for k, name in enumerate(PERIODS):
        out[name] = [f"{y0 + k * years}-10-01", f"{y0 + (k + 1) * years}-10-01"]
    if np.datetime64(out["eval"][1]) > dates[-1] + np.timedelta64(1, "D"):
        raise ConfigError(f"data ending {dates[-1]} is too short for four {years}-year periods; "
                          "set 'periods' or 'period_years' in the config")
    return out


def period_indices(dates, periods: dict) -> dict:
    idx = {}
    for name in PERIODS:
        if name not in periods:
            raise ConfigError(f"period {name!r} missing")
        a, b = (np.datetime64(x, "D") for x in periods[name])
        t0 = int((a - dates[0]).astype(int))
        t1 = int((b - dates[0]).astype(int))
        if not (0 <= t0 < t1 <= len(dates)):
            raise ConfigError(f"period {name} {periods[name]} is outside the data range")
        idx[name] = (t0, t1)
    spans = [idx[n] for n in PERIODS]
    for (_, e), (s, _) in zip(spans, spans[1:]):
        if s < e:
            raise ConfigError("periods must be non-overlapping and in train/holdout/test/eval order")
    return idx


def n_years(span) -> int:
    return max(1, int(round((span[1] - span[0]) / 365.25)))


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class Setup:
    config: ExperimentConfig
    streams: RngStreams
    full: PanelData  # every label, for the final score only
    data: PanelData  # evaluation labels removed, training labels subsampled
    truth_sim: Optional[PanelData]  # dense simulated labels for pretraining
    graph: object
    periods: dict  # name -> (t0, t1)
    budget: int
    train_budget: int
    init_params: Optional[object] = None

    def new_model(self) -> PredictiveModel:
        cfg = self.config
        m = PredictiveModel(self.data.D, self.graph, cfg.hidden, seed=cfg.seed, lr=cfg.lr)
        if self.init_params is not None:
            m.params.load(self.init_params)
        return m


def prepare(config: ExperimentConfig) -> Setup:
    config.validate()
    streams = RngStreams(config.seed)
    sim = None
    if config.features_csv:
        edges, raw, _ = ingest(config.features_csv, config.observations_csv, config.edges_csv)
        years = config.period_years or 9
    else:
        years = config.period_years or 4
        sc = SynthConfig(**{**config.synth, "years": 4 * years, "seed": config.seed,
                            "target": config.target, "obs_fraction": _fraction(config.synth["obs_fraction"])})
        basin = generate_basin(sc)
        edges = basin.edges
        raw = RawPanel(basin.segment_ids, basin.dates, basin.features, basin.observed, FEATURES)
        sim = simulate_physics(basin, bias=config.sim_bias, seed=config.seed + 1)
    periods = period_indices(raw.dates, config.periods or default_periods(raw.dates, years))
    t0, t1 = periods["train"]
    full = raw.panel(config.target, fit=slice(t0, t1))
    labels = full.labels.copy()
    e0, e1 = periods["eval"]
    labels[:, e0:] = np.nan  # nothing at or after the evaluation start is visible
    if config.train_label_fraction < 1.0:
        keep = streams.fresh("train-subsample").random(labels[:, t0:t1].shape) < config.train_label_fraction
        labels[:, t0:t1] = np.where(keep, labels[:, t0:t1], np.nan)
    data = full.with_labels(labels)
    if sim is not None:
        sim_panel = full.with_labels((sim - full.target_mean) / full.target_std)
        sim_panel.labels[:, e0:] = np.nan
    else:
        sim_panel = None
    graph = build_graph(edges, config.graph_variant, raw.segment_ids)

    s0, s1 = periods["test"]
    pool = data.n_labels(s0, s1)
    budget = config.budget if config.budget is not None else max(1, int(round(config.budget_fraction * pool)))
    train_budget = max(1, int(round(budget * (t1 - t0) / (s1 - s0))))
    setup = Setup(config, streams, full, data, sim_panel, graph, periods, budget, train_budget)
    if config.pretrain_predictive:
        if sim_panel is None:
            raise ConfigError("predictive pretraining needs simulated data (synthetic input)")
        m = setup.new_model()
        train_update(m, sim_panel, sim_panel.observed, epochs=config.pretrain_epochs,
                     t_range=periods["train"])
        setup.init_params = m.params.copy()
    return setup


def _fraction(v):
    return tuple(v) if isinstance(v, (list, tuple)) else float(v)


def _holdout(setup: Setup, data=None, name="holdout") -> HoldoutEvaluator:
    return HoldoutEvaluator(data or setup.data, setup.periods["holdout"], setup.config.holdout_fraction,
                            setup.streams.fresh(name), setup.config.warmup_days)


def train_decision_model(setup: Setup, agent: Agent | None = None) -> tuple:
    """Optional simulation pretraining, then multi-pass training.  Returns ``(agent, info)``."""
    cfg = setup.config
    info = {}
    if agent is None:
        if cfg.pretrained:
            agent = load_agent(cfg.pretrained, AgentConfig(**cfg.agent_kwargs()), cfg.seed)
        else:
            agent = Agent(cfg.hidden + 3, AgentConfig(**cfg.agent_kwargs()), cfg.seed)
    if agent.n_inputs != cfg.hidden + 3:
        raise ConfigError(f"decision model expects {agent.n_inputs - 3} hidden units, config has {cfg.hidden}")
    if cfg.pretrain_passes > 0 and not cfg.pretrained:
        info["pretrain"] = pretrain_simulated(setup, agent)
    rep = multi_pass_train(agent, setup.new_model, setup.data, setup.periods["train"], _holdout(setup),
                           setup.train_budget, cfg.passes, cfg.stream_config(),
                           setup.streams.child("train"), n_years(setup.periods["train"]))
    info["train_pass_holdout_rmse"] = rep.pass_rmse
    info["train_pass_labels"] = rep.pass_granted
    return agent, info


def pretrain_simulated(setup: Setup, agent: Agent) -> dict:
    if setup.truth_sim is None:
        raise ConfigError("policy pretraining needs simulated data (synthetic input)")
    cfg = setup.config
    rep = pretrain_policy(agent, setup.new_model, setup.truth_sim, setup.periods["train"],
                          setup.periods["holdout"], setup.train_budget, cfg.pretrain_passes,
                          cfg.stream_config(), cfg.holdout_fraction, cfg.seed)
    return {"holdout_rmse": rep.pass_rmse, "labels": rep.pass_granted}


def calibrate(setup: Setup) -> tuple:
    """Fit the baseline threshold on training-period replays.

    The first replay labels at random at the budget rate.  Each further
    round replays with the thresholded policy itself and refits, so the
    threshold matches the scores the policy meets when it drives the
    fine-tuning (a fresh model is much less uncertain than a trained one).
    """
    cfg = setup.config
    t0, t1 = setup.periods["train"]
    pool = setup.data.n_labels(t0, t1)
    stats = node_stats(setup.graph, setup.data.features[:, t0:t1])
    train_y = n_years((t0, t1))
    budget_years = setup.budget * train_y / n_years(setup.periods["test"])
    inner = RandomStreamPolicy(min(1.0, setup.train_budget / max(pool, 1)), setup.streams.fresh("calib-labels"))
    calib = None
    for k in range(cfg.calib_rounds + 1):
        rec = ScoreRecorder(inner)
        ledger = BudgetLedger.for_period(setup.train_budget, train_y) if k else BudgetLedger(pool)
        run_stream(setup.new_model(), rec, setup.data, (t0, t1), ledger, "test", None, cfg.stream_config(),
                   setup.streams.fresh(f"calib-mc-{k}"))
        u = np.asarray(rec.u)
        if cfg.policy == "uncertainty":
            calib = calibrate_threshold("uncertainty", u, budget_years, train_y)
            inner = UncertaintyPolicy(calib)
        else:
            lo, hi = (float(u.min()), float(u.max())) if u.size else (0.0, 1.0)
            probe = ThresholdCalib("udc", 0.0, tuple(cfg.udc_weights), lo, hi)
            scores = udc_scores(u, stats, probe, rows=np.asarray(rec.rows, dtype=int))
            calib = calibrate_threshold("udc", scores, budget_years, train_y, weights=cfg.udc_weights,
                                        u_range=(lo, hi))
            inner = UDCPolicy(calib, stats)
    return calib, stats


@dataclass
class ResultBundle:
    rmse_eval: float
    n_labeled: int
    budget: int
    metrics: list
    ledger: BudgetLedger
    hist_week: list  # (week, count)
    hist_segment: list  # (segment_id, count)
    config: ExperimentConfig
    info: dict
    calib: Optional[ThresholdCalib] = None  # threshold baselines only

    def summary(self) -> dict:
        return {
            "rmse_eval": self.rmse_eval,
            "n_labeled": self.n_labeled,
            "budget": self.budget,
            "policy": self.config.policy,
            "graph_variant": self.config.graph_variant,
            "target": self.config.target,
            "seed": self.config.seed,
            "info": self.info,
        }

    def write(self, directory, data: PanelData) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {k: d / v for k, v in {
            "result": "result.json", "config": "config.json", "metrics": "metrics.jsonl",
            "labeled": "labeled.csv", "hist_week": "hist_week.csv", "hist_segment": "hist_segment.csv"}.items()}
        paths["result"].write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        paths["config"].write_text(self.config.to_json() + "\n")
        write_metrics(paths["metrics"], self.metrics)
        write_labeled_log(paths["labeled"], self.ledger, data)
        if self.calib is not None:
            paths["calibration"] = d / "calibration.json"
            self.calib.save(paths["calibration"])
        for key, head, rows in (("hist_week", ("week", "count"), self.hist_week),
                                ("hist_segment", ("segment_id", "count"), self.hist_segment)):
            with paths[key].open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(head)
                w.writerows(rows)
        return paths


def evaluate(model: PredictiveModel, setup: Setup) -> float:
    """RMSE in original units on evaluation-period observations.

    The model runs from a zero state at the test start through the
    evaluation period so the state is warm when scoring begins.
    """
    s0, _ = setup.periods["test"]
    e0, e1 = setup.periods["eval"]
    y, _, _, _ = model.run(setup.full.X[s0:e1])
    pred = y[e0 - s0:].T
    truth = setup.full.labels[:, e0:e1]
    ok = np.isfinite(truth)
    if not ok.any():
        raise ConfigError("evaluation period has no observations")
    return float(np.sqrt(np.mean((pred[ok] - truth[ok]) ** 2))) * setup.full.target_std


def histograms(ledger: BudgetLedger, data: PanelData):
    weeks = defaultdict(int)
    segs = defaultdict(int)
    for day, seg, ok, _ in ledger.log:
        if ok:
            wk = int((data.dates[day] - data.dates[day].astype("datetime64[Y]")).astype(int)) // 7 + 1
            weeks[min(wk, 52)] += 1
            segs[seg] += 1
    return ([(w, weeks.get(w, 0)) for w in range(1, 53)],
            [(data.segment_ids[i], segs.get(i, 0)) for i in range(data.n)])


def test_stage(setup: Setup, agent: Agent | None = None, info: dict | None = None) -> ResultBundle:
    """Collect labels over the test period, train the final model and score it."""
    cfg = setup.config
    info = dict(info or {})
    s0, s1 = setup.periods["test"]
    years = n_years((s0, s1))
    rng = setup.streams.fresh("test-pass")
    model = setup.new_model()
    calib = None
    if cfg.policy == "random":
        sel = random_pool_select(setup.data, (s0, s1), setup.budget, setup.streams.fresh("random-pool"))
        ledger = BudgetLedger(setup.budget)
        for t in range(s0, s1):  # day order, so the log reads like a stream
            for i in np.flatnonzero(sel[:, t]):
                if ledger.remaining > 0:
                    ledger.grant(t, i, 0)
        labeled, metrics = sel, []
    else:
        if cfg.policy == "grreal":
            if agent is None:
                raise ConfigError("the GR-REAL test pass needs a trained decision model")
            rate = None
            if agent.config.pace:
                t0, t1 = setup.periods["train"]
                expected = setup.data.n_labels(t0, t1) * (s1 - s0) / (t1 - t0)
                rate = min(1.0, setup.budget / max(expected, 1.0))
            policy = GRRealPolicy(agent, training=False, rate=rate)
        else:
            calib, stats = calibrate(setup)
            info["threshold"] = calib.threshold
            policy = UncertaintyPolicy(calib) if cfg.policy == "uncertainty" else UDCPolicy(calib, stats)
        ledger = BudgetLedger.for_period(setup.budget, years)
        res = run_stream(model, policy, setup.data, (s0, s1), ledger, "test", None, cfg.stream_config(), rng)
        labeled, metrics = res.labeled, res.metrics
    if cfg.final_init == "fresh":
        model = setup.new_model()
    if labeled.any():
        model.optimizer.reset()
        train_update(model, setup.data, labeled, epochs=cfg.final_epochs, window=cfg.finetune_window,
                     t_range=(s0, s1))
    rmse = evaluate(model, setup)
    weeks, segs = histograms(ledger, setup.data)
    return ResultBundle(rmse, ledger.n_granted, setup.budget, metrics, ledger, weeks, segs, cfg, info, calib)


def run_experiment(config: ExperimentConfig, output_dir=None) -> ResultBundle:
    """Full pipeline; writes the bundle when an output directory is configured."""
    stage = "prepare"
    try:
        setup = prepare(config)
        agent, info = None, {}
        if config.policy == "grreal":
            stage = "train"
            agent, info = train_decision_model(setup)
        stage = "test"
        bundle = test_stage(setup, agent, info)
    except RiveralError as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc
    out = output_dir or config.output_dir
    if out:
        bundle.write(out, setup.data)
    return bundle


# ---------------------------------------------------------------------------
# sweeps


def _cell(args):
    cfg_doc, out = args
    cfg = ExperimentConfig.from_dict(cfg_doc)
    try:
        b = run_experiment(cfg, out)
        return {"rmse": b.rmse_eval, "n_labeled": b.n_labeled, "budget": b.budget, "status": "ok", "error": ""}
    except Exception as exc:  # recorded, the sweep goes on
        log.exception("sweep cell failed")
        return {"rmse": float("nan"), "n_labeled": 0, "budget": cfg.budget, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def sweep(base: ExperimentConfig, seeds, budgets=None, policies=None, variants=None,
          output_dir=None, workers: int = 1) -> dict:
    """Grid over policies x budgets x graph variants x seeds.

    Returns ``{"runs": [...], "summary": [...]}``; summary rows hold the mean
    and population std of evaluation RMSE per (policy, budget, variant).
    """
    seeds = list(seeds)
    cells = []
    for pol in policies or [base.policy]:
        for bud in budgets or [base.budget]:
            for var in variants or [base.graph_variant]:
                for s in seeds:
                    cfg = replace(base, policy=pol, budget=bud, graph_variant=var, seed=int(s), output_dir=None)
                    out = None
                    if output_dir:
                        out = str(Path(output_dir) / f"{pol}_b{bud}_{var}_s{s}")
                    cells.append(({"policy": pol, "budget_arg": bud, "graph_variant": var, "seed": int(s)},
                                  (cfg.to_dict(), out)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell, [c[1] for c in cells]))
    else:
        results = [_cell(c[1]) for c in cells]
    runs = [{**key, **res} for (key, _), res in zip(cells, results)]
    groups = defaultdict(list)
    for r in runs:
        groups[(r["policy"], r["budget_arg"], r["graph_variant"])].append(r)
    summary = []
    for (pol, bud, var), rs in groups.items():
        vals = np.array([r["rmse"] for r in rs if r["status"] == "ok"])
        summary.append({"policy": pol, "budget_arg": bud, "graph_variant": var, "n": int(vals.size),
                        "failed": len(rs) - int(vals.size),
                        "mean": float(vals.mean()) if vals.size else float("nan"),
                        "std": float(vals.std()) if vals.size else float("nan")})
    table = {"runs": runs, "summary": summary}
    if output_dir:
        write_sweep(output_dir, table)
    return table


def write_sweep(directory, table: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "sweep.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    cols = ["policy", "budget_arg", "graph_variant", "seed", "rmse", "n_labeled", "budget", "status", "error"]
    with (d / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in table["runs"]:
            w.writerow([r[c] for c in cols])
        for s in table["summary"]:
            w.writerow([s["policy"], s["budget_arg"], s["graph_variant"], "summary", s["mean"], "", "",
                        f"std={s['std']}", ""])
