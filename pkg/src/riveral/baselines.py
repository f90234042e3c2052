"""Comparison policies: random pool selection, uncertainty and UDC thresholds."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .env import LABEL, Policy, to_actions
from .errors import ConfigError
from .graph import NodeStats

log = logging.getLogger(__name__)

SCORE_KINDS = ("uncertainty", "udc")


@dataclass(frozen=True)
class ThresholdCalib:
    kind: str
    threshold: float
    weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    u_lo: float = 0.0  # affine map of raw uncertainty onto [0, 1]
    u_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score kind {self.kind!r}")
        if not np.isfinite(self.threshold):
            raise ConfigError("threshold must be finite")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("UDC weights must be three non-negative numbers summing to 1")

    def save(self, path) -> None:
        doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ThresholdCalib":
        doc = json.loads(Path(path).read_text())
        doc["weights"] = tuple(doc["weights"])
        return cls(**doc)


def random_pool_select(data, period, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``budget`` observed (segment, day) pairs in ``period``.

    Returns a boolean ``(N, T)`` selection.  Sees the whole pool at once.
    """
    t0, t1 = period
    pool = np.argwhere(data.observed[:, t0:t1])
    if budget > len(pool):
        log.warning("budget %d exceeds the pool of %d observations; clamping", budget, len(pool))
        budget = len(pool)
    if budget < 0:
        raise ConfigError("budget must be non-negative")
    pick = np.sort(rng.choice(len(pool), size=int(budget), replace=False))
    sel = np.zeros((data.n, data.T), dtype=bool)
    sel[pool[pick, 0], pool[pick, 1] + t0] = True
    return sel


def _rescale(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    span = v.max() - v.min()
    return (v - v.min()) / span if span > 0 else np.zeros_like(v)


def udc_scores(u, stats: NodeStats, calib: ThresholdCalib, rows=None) -> np.ndarray:
    """``w_u*u + w_c*centrality + w_d*density`` with every term on ``[0, 1]``.

    Centrality and density are min-max rescaled over segments; uncertainty
    uses the fixed map learnt at calibration time so that one threshold is
    meaningful on every day.  ``rows`` gives the segment of each ``u``
    entry when ``u`` is not one value per segment.
    """
    span = calib.u_hi - calib.u_lo
    ur = (np.asarray(u, dtype=float) - calib.u_lo) / span if span > 0 else np.zeros(np.shape(u))
    wu, wc, wd = calib.weights
    c, d = _rescale(stats.centrality), _rescale(stats.density)
    if rows is not None:
        c, d = c[rows], d[rows]
    return wu * ur + wc * c + wd * d


def calibrate_threshold(kind: str, scores, budget: int, years: float, train_years: float | None = None,
                        weights=(1 / 3, 1 / 3, 1 / 3), u_range=(0.0, 1.0)) -> ThresholdCalib:
    """Threshold whose training-period selection rate spends ``budget`` evenly over ``years``.

    ``scores`` are the scores of every eligible row seen in a training
    replay spanning ``train_years``.  The selection rate is
    ``budget * train_years / years / len(scores)`` and the threshold is the
    ``1 - rate`` quantile.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ConfigError("no training scores to calibrate on")
    train_years = years if train_years is None else train_years
    rate = budget * (train_years / years) / scores.size
    if np.ptp(scores) == 0:
        log.warning("all %d training scores equal %g", scores.size, scores[0])
        thr = float(scores[0])
    elif rate >= 1.0:
        thr = float(scores.min())
    else:
        thr = float(np.quantile(scores, 1.0 - max(rate, 0.0)))
    return ThresholdCalib(kind, thr, tuple(float(w) for w in weights), float(u_range[0]), float(u_range[1]))


def uncertainty_policy(u, calib: ThresholdCalib, eligible) -> np.ndarray:
    return to_actions((np.asarray(u) > calib.threshold) & np.asarray(eligible, dtype=bool))


def udc_policy(u, stats: NodeStats, calib: ThresholdCalib, eligible) -> np.ndarray:
    score = udc_scores(u, stats, calib)
    return to_actions((score > calib.threshold) & np.asarray(eligible, dtype=bool))


# ---------------------------------------------------------------------------
# stream wrappers


class UncertaintyPolicy(Policy):
    def __init__(self, calib: ThresholdCalib):
        self.calib = calib

    def select(self, S, eligible, t, ctx):
        A = uncertainty_policy(ctx["u"], self.calib, eligible)
        return A[:, LABEL] == 1, np.asarray(ctx["u"]) - self.calib.threshold


class UDCPolicy(Policy):
    def __init__(self, calib: ThresholdCalib, stats: NodeStats):
        self.calib, self.stats = calib, stats

    def select(self, S, eligible, t, ctx):
        score = udc_scores(ctx["u"], self.stats, self.calib)
        want = (score > self.calib.threshold) & np.asarray(eligible, dtype=bool)
        return want, score - self.calib.threshold


class RandomStreamPolicy(Policy):
    """Label each eligible row with probability ``rate``."""

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate, self.rng = float(rate), rng

    def select(self, S, eligible, t, ctx):
        eligible = np.asarray(eligible, dtype=bool)
        want = (self.rng.random(len(eligible)) < self.rate) & eligible
        return want, np.zeros(len(eligible))


class ScoreRecorder(Policy):
    """Delegates to ``inner`` and keeps ``(segment, u)`` for every eligible row."""

    def __init__(self, inner: Policy):
        self.inner = inner
        self.rows, self.u = [], []

    def select(self, S, eligible, t, ctx):
        idx = np.flatnonzero(np.asarray(eligible, dtype=bool))
        self.rows.extend(idx.tolist())
        self.u.extend(np.asarray(ctx["u"])[idx].tolist())
        return self.inner.select(S, eligible, t, ctx)
