"""Recurrent graph network: the predictive model.

Each segment runs an LSTM-like cell whose cell state also receives the
previous-day transferred variables of its upstream neighbours, weighted by
the graph adjacency and gated by the forget gate::

    q_j   = tanh(U_q h_j + b_q)                       (from day t-1)
    c_i   = f * (c_i + sum_j W_ji q_j) + g * cand
    h_i   = o * tanh(c_i)
    y_i   = W_y h_i + b_y

Heavy loops live in :mod:`riveral.backend` (compiled or numpy).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .errors import ConfigError, DimensionError, EmptyLossError, NumericalError, TrainingError
from .graph import RiverGraph
from .numerics import Adam, ParamStore, RngStreams, check_finite, init_uniform, sample_dropout_mask

GATES = ("c", "f", "g", "o")


@dataclass
class NetState:
    """Per-segment hidden and cell state (``N x H`` each)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, n: int, hidden: int) -> "NetState":
        return cls(np.zeros((n, hidden)), np.zeros((n, hidden)))

    def copy(self) -> "NetState":
        return NetState(self.h.copy(), self.c.copy())


class PredictiveModel:
    def __init__(self, n_features: int, graph: RiverGraph, hidden: int = 20, seed: int = 0,
                 lr: float = 3e-3, kernels=None):
        if hidden < 1 or n_features < 1:
            raise ConfigError("hidden size and feature count must be positive")
        self.H = int(hidden)
        self.D = int(n_features)
        self.graph = graph
        self.kernels = kernels or backend.kernels
        self.params = ParamStore()
        self._csr = graph.incoming()
        self.optimizer = Adam(lr=lr)
        self.reset(seed)

    @property
    def n(self) -> int:
        return self.graph.n

    def reset(self, seed: int) -> None:
        """Re-draw all parameters and clear optimizer state."""
        rng = RngStreams(seed).fresh("rgrn-init")
        H, D = self.H, self.D
        p = self.params
        p.add("U_q", init_uniform(rng, (H, H), H))
        p.add("b_q", init_uniform(rng, (H,), H))
        for g in GATES:
            p.add(f"U_{g}", init_uniform(rng, (H, H), H + D))
            p.add(f"V_{g}", init_uniform(rng, (H, D), H + D))
            p.add(f"b_{g}", init_uniform(rng, (H,), H + D))
        p.add("W_y", init_uniform(rng, (1, H), H))
        p.add("b_y", np.zeros(1))
        self.optimizer.reset()

    def copy(self) -> "PredictiveModel":
        other = PredictiveModel.__new__(PredictiveModel)
        other.H, other.D, other.graph, other.kernels = self.H, self.D, self.graph, self.kernels
        other._csr = self._csr
        other.params = self.params.copy()
        other.optimizer = Adam(lr=self.optimizer.lr, t=self.optimizer.t,
                               m={k: v.copy() for k, v in self.optimizer.m.items()},
                               v={k: v.copy() for k, v in self.optimizer.v.items()})
        return other

    # -- kernel plumbing -------------------------------------------------
    def _packed(self):
        p = self.params.params
        Ut = np.ascontiguousarray(np.concatenate([p[f"U_{g}"].T for g in GATES], axis=1))
        Vt = np.ascontiguousarray(np.concatenate([p[f"V_{g}"].T for g in GATES], axis=1))
        b = np.concatenate([p[f"b_{g}"] for g in GATES])
        Uqt = np.ascontiguousarray(p["U_q"].T)
        ip, src, w = self._csr
        return (Ut, Vt, b, Uqt, p["b_q"].copy(), p["W_y"][0].copy(), float(p["b_y"][0]), ip, src, w)

    def _unpack_grads(self, grads) -> dict:
        dUt, dVt, db, dUqt, dbq, dwy, dby = grads
        H = self.H
        out = {"U_q": np.asarray(dUqt).T.copy(), "b_q": np.asarray(dbq).copy()}
        for k, g in enumerate(GATES):
            sl = slice(k * H, (k + 1) * H)
            out[f"U_{g}"] = np.asarray(dUt)[:, sl].T.copy()
            out[f"V_{g}"] = np.asarray(dVt)[:, sl].T.copy()
            out[f"b_{g}"] = np.asarray(db)[sl].copy()
        out["W_y"] = np.asarray(dwy)[None, :].copy()
        out["b_y"] = np.array([dby])
        return out

    def _check_state(self, state: NetState) -> None:
        if state.h.shape != (self.n, self.H) or state.c.shape != (self.n, self.H):
            raise DimensionError(f"state must be {(self.n, self.H)}, got {state.h.shape}/{state.c.shape}")

    def _mask(self, mask):
        if mask is None:
            return None
        m = np.ascontiguousarray(mask, dtype=np.float64)
        if m.shape != (self.n, self.H):
            raise DimensionError(f"dropout mask must be {(self.n, self.H)}")
        return m

    # -- forward ---------------------------------------------------------
    def run(self, X: np.ndarray, state: NetState | None = None, mask=None, cache: bool = False,
            packed=None):
        """Unroll over time-major inputs ``X`` of shape ``(T, N, D)``.

        ``packed`` lets callers reuse one ``_packed()`` snapshot across calls
        while parameters are not changing.
        """
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != (self.n, self.D):
            raise DimensionError(f"inputs must be (T, {self.n}, {self.D}), got {X.shape}")
        if X.shape[0] == 0:
            raise ConfigError("empty time range")
        state = state or NetState.zeros(self.n, self.H)
        self._check_state(state)
        out = self.kernels.forward(*(packed or self._packed()), X, np.ascontiguousarray(state.h),
                                   np.ascontiguousarray(state.c), self._mask(mask), cache)
        check_finite(out[0], "predictions")
        return out

    def step(self, state: NetState, x_t: np.ndarray, mask=None, packed=None):
        """One day for all segments: returns ``(new_state, y_hat)``."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (self.n, self.D):
            raise DimensionError(f"x_t must be {(self.n, self.D)}, got {x_t.shape}")
        y, hs, cs, _ = self.run(x_t[None], state, mask, packed=packed)
        return NetState(hs[1], cs[1]), y[0]

    def forward_window(self, data, t0: int, t1: int, state: NetState | None = None, mask=None):
        """Predictions ``(N, t1-t0)``, final state and hidden ``(N, t1-t0, H)``."""
        if not (0 <= t0 < t1 <= data.T):
            raise ConfigError(f"bad time range [{t0}, {t1}) for {data.T} days")
        y, hs, cs, _ = self.run(data.X[t0:t1], state, mask)
        return y.T.copy(), NetState(hs[-1].copy(), cs[-1].copy()), hs[1:].transpose(1, 0, 2).copy()

    # -- loss and gradients ---------------------------------------------
    def loss_and_grads(self, X, labels, state: NetState | None = None, mask=None):
        """Masked MSE over the finite entries of ``labels`` (``N x T``) and its gradients."""
        y, hs, cs, cache = self.run(X, state, mask, cache=True)
        lab = np.asarray(labels, dtype=np.float64).T
        obs = np.isfinite(lab)
        n_obs = int(obs.sum())
        if n_obs == 0:
            raise EmptyLossError("no labeled samples in window")
        resid = np.where(obs, y - np.where(obs, lab, 0.0), 0.0)
        loss = float(np.sum(resid * resid) / n_obs)
        dY = np.ascontiguousarray(2.0 * resid / n_obs)
        grads = self.kernels.backward(*self._packed(), np.ascontiguousarray(X, dtype=np.float64),
                                      self._mask(mask), hs, cs, cache, dY)
        return loss, self._unpack_grads(grads), NetState(hs[-1].copy(), cs[-1].copy())

    # -- checkpoints -----------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        save_params(path, self.params, kind="rgrn",
                    meta={"hidden": self.H, "n_features": self.D, **(meta or {})})

    def load(self, path) -> dict:
        store, doc = load_params(path, kind="rgrn")
        self.params.load(store)
        return doc.get("meta", {})


def masked_loss(y_hat, labels) -> float:
    """Mean squared error over labeled entries (NaN marks unlabeled)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if y_hat.shape != labels.shape:
        raise DimensionError(f"prediction shape {y_hat.shape} != label shape {labels.shape}")
    obs = np.isfinite(labels)
    if not obs.any():
        raise EmptyLossError("no labeled samples")
    d = y_hat[obs] - labels[obs]
    return float(np.mean(d * d))


def rmse(y_hat, labels) -> float:
    return float(np.sqrt(masked_loss(y_hat, labels)))


def _chunks(t0: int, t1: int, window: int):
    s = t0
    while s < t1:
        yield s, min(s + window, t1)
        s += window


def train_update(model: PredictiveModel, data, labeled: np.ndarray, epochs: int = 1,
                 window: int = 365, t_range=None, init_state: NetState | None = None,
                 clip: float = 5.0, mask=None) -> float:
    """Truncated BPTT over the labeled entries, one Adam step per chunk.

    ``labeled`` is a boolean ``(N, T)`` selection of ``data.labels``.  Chunks
    of ``window`` days are processed in order with the hidden state carried
    (but not differentiated) across chunk boundaries.  Returns the mean
    pre-update loss of the last epoch.
    """
    labeled = np.asarray(labeled, dtype=bool) & data.observed
    if not labeled.any():
        raise EmptyLossError("labeled set is empty")
    days = np.flatnonzero(labeled.any(axis=0))
    t0, t1 = (int(days[0]), int(days[-1]) + 1) if t_range is None else t_range
    lab = np.where(labeled, data.labels, np.nan)
    last = float("nan")
    for _ in range(int(epochs)):
        state = init_state
        losses = []
        for s, e in _chunks(t0, t1, window):
            X = data.X[s:e]
            chunk_lab = lab[:, s:e]
            if not np.isfinite(chunk_lab).any():
                _, hs, cs, _ = model.run(X, state)
                state = NetState(hs[-1].copy(), cs[-1].copy())
                continue
            model.params.zero_grad()
            try:
                loss, grads, state = model.loss_and_grads(X, chunk_lab, state, mask)
            except NumericalError as exc:
                raise TrainingError(f"forward pass diverged in days [{s}, {e}): {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"loss is {loss} in days [{s}, {e})")
            for k, g in grads.items():
                model.params.grads[k][...] = g
            model.params.clip_grads(clip)
            model.optimizer.step(model.params)
            losses.append(loss)
        if losses:
            last = float(np.mean(losses))
    return last


def mc_dropout_step(model: PredictiveModel, state: NetState, x_t: np.ndarray, K: int = 10,
                    drop: float = 0.2, rng: np.random.Generator | None = None):
    """K masked one-day passes from ``state``: returns ``(mean, std)`` per segment."""
    if K < 2:
        raise ConfigError("MC dropout needs at least two ensemble members")
    if not (0.0 <= drop < 1.0):
        raise ConfigError(f"drop probability must lie in [0, 1), got {drop}")
    keep = 1.0 - drop
    packed = model._packed()
    preds = np.empty((K, model.n))
    for k in range(K):
        mask = None if drop == 0.0 else sample_dropout_mask(keep, (model.n, model.H), rng).scaled
        preds[k] = model.step(state, x_t, mask, packed)[1]
    # moments about the first member: identical members give exactly zero spread
    d = preds - preds[0]
    return preds[0] + d.mean(axis=0), d.std(axis=0)


def predict_with_uncertainty(model: PredictiveModel, data, t: int, K: int = 10, drop: float = 0.2,
                             rng: np.random.Generator | None = None, state: NetState | None = None):
    """MC-dropout prediction for day ``t``.

    ``state`` is the carried state entering day ``t``; when omitted the
    deterministic model is unrolled from zeros over days ``[0, t)`` first.
    """
    if state is None:
        state = NetState.zeros(model.n, model.H)
        if t > 0:
            _, state, _ = model.forward_window(data, 0, t)
    return mc_dropout_step(model, state, data.X[t], K, drop, rng)


# ---------------------------------------------------------------------------
# checkpoint format: JSON, float repr round-trips exactly

FORMAT = "riveral-params"
FORMAT_VERSION = 1


def save_params(path, store: ParamStore, kind: str, meta: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "params": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in store.params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_params(path, kind: str | None = None):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: not a {FORMAT} v{FORMAT_VERSION} file")
    if kind is not None and doc.get("kind") != kind:
        raise ConfigError(f"{path}: holds {doc.get('kind')!r} parameters, expected {kind!r}")
    store = ParamStore()
    for k, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        store.add(k, arr)
    return store, doc
