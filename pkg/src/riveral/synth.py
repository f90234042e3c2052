"""Synthetic pseudo-physics basins.

A deliberately simple surrogate for a process-based stream model: it keeps
seasonality, weather noise, heterogeneous segment responses and a one-day
delayed upstream coupling, which is what the learning method exploits.

Temperature: each segment relaxes toward its local air temperature at a
geometry-dependent rate (cooled by precipitation); downstream segments mix
that local response with the weighted mean of upstream previous-day
temperatures::

    T_i(t) = (1 - a) * local_i(t) + a * sum_j w_ji T_j(t-1) + noise

Streamflow: a linear reservoir per segment fed by precipitation, plus the
previous-day outflow of the upstream segments scaled by ``a``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import PanelData, standardize
from .errors import ConfigError
from .graph import adjacency_weights, build_graph, write_edges_csv
from .numerics import RngStreams

FEATURES = ("air_temp", "precip", "doy_sin", "doy_cos", "elevation", "length", "slope")
TEMP_RANGE = (-5.0, 40.0)


@dataclass(frozen=True)
class SynthConfig:
    n_segments: int = 12
    years: int = 16
    seed: int = 0
    noise: float = 0.3
    advection: float = 0.5
    max_in_degree: int = 2
    edges: Optional[tuple] = None  # explicit ((from, to, metres), ...)
    obs_fraction: float | tuple = (0.05, 0.35)  # scalar, or (low, high) drawn per segment
    target: str = "temperature"
    start: str = "1980-10-01"

    def validate(self) -> None:
        if self.n_segments < 1 or self.years < 1:
            raise ConfigError("need at least one segment and one year")
        if not 0.0 <= self.advection <= 1.0:
            raise ConfigError("advection coefficient must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")
        if self.max_in_degree < 1:
            raise ConfigError("max in-degree must be at least 1")
        fr = np.atleast_1d(np.asarray(self.obs_fraction, dtype=float))
        if np.any((fr < 0) | (fr > 1)):
            raise ConfigError("observation fractions must lie in [0, 1]")
        if self.target not in ("temperature", "flow"):
            raise ConfigError(f"unknown target {self.target!r}")


@dataclass
class SynthBasin:
    config: SynthConfig
    segment_ids: tuple
    edges: list
    dates: np.ndarray
    features: np.ndarray  # raw, (N, T, D)
    truth: np.ndarray  # dense simulated target, (N, T)
    observed: np.ndarray  # sparse subset, NaN elsewhere
    params: dict = field(default_factory=dict)

    def panel(self, fit: slice = slice(None), labels: np.ndarray | None = None) -> PanelData:
        """Standardized panel with the sparse observations as labels."""
        return standardize(self.segment_ids, self.dates, self.features,
                           self.observed if labels is None else labels, self.config.target,
                           fit=fit, raw_truth=self.truth, feature_names=FEATURES)

    def to_csv(self, directory) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "features": directory / "features.csv",
            "observations": directory / "observations.csv",
            "edges": directory / "edges.csv",
        }
        write_features_csv(paths["features"], self.segment_ids, self.dates, self.features, FEATURES)
        write_observations_csv(paths["observations"], self.segment_ids, self.dates, self.observed)
        write_edges_csv(paths["edges"], self.edges)
        return paths


def random_river(n: int, max_in: int, rng: np.random.Generator):
    """Random river tree; segment ``s0`` is the outlet and edges point downstream."""
    ids = [f"s{k}" for k in range(n)]
    indeg = [0] * n
    edges = []
    for k in range(1, n):
        open_ = [j for j in range(k) if indeg[j] < max_in]
        down = int(rng.choice(open_))
        indeg[down] += 1
        edges.append((ids[k], ids[down], float(np.round(rng.lognormal(np.log(6000.0), 0.6), 1))))
    return ids, edges


def _upstream_weights(ids, edges):
    """Normalised direct-upstream weights: list of (j, w) per segment."""
    pos = {s: k for k, s in enumerate(ids)}
    idx = [(pos[a], pos[b], d) for a, b, d in edges]
    W = adjacency_weights(len(ids), idx)
    ups = [[] for _ in ids]
    for i, j, _ in idx:
        ups[j].append(i)
    out = []
    for j in range(len(ids)):
        if not ups[j]:
            out.append(([], np.zeros(0)))
            continue
        w = np.array([W[i, j] for i in sorted(ups[j])])
        out.append((sorted(ups[j]), w / w.sum()))
    return out


def _topo_order(ids, edges):
    g = build_graph(edges, "direct", ids)  # validates acyclicity
    indeg = np.zeros(len(ids), dtype=int)
    for _, j, _ in g.edges:
        indeg[j] += 1
    order, ready = [], [k for k in range(len(ids)) if indeg[k] == 0]
    down = {}
    for i, j, _ in g.edges:
        down.setdefault(i, []).append(j)
    while ready:
        k = ready.pop(0)
        order.append(k)
        for j in down.get(k, []):
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    return order


def _drivers(n, T, day0, geo, rng):
    doy = (np.arange(T) + day0) % 365.25
    season = np.sin(2 * np.pi * (doy - 110.0) / 365.25)
    weather = np.zeros(T)
    shocks = rng.normal(0.0, 1.2, size=T)
    for t in range(1, T):
        weather[t] = 0.8 * weather[t - 1] + shocks[t]
    # summer weather is more variable
    weather *= 1.0 + 0.6 * np.clip(season, 0, None)
    local = rng.normal(0.0, 0.7, size=(n, T))
    air = 11.0 + 12.0 * season[None, :] + weather[None, :] + local - 6.0 * geo["elevation"][:, None]
    wet = rng.random(T) < 0.3
    amount = rng.lognormal(1.0, 0.9, size=T) * wet
    precip = amount[None, :] * rng.lognormal(0.0, 0.3, size=(n, T))
    return doy, air, precip


def generate_basin(config: SynthConfig) -> SynthBasin:
    config.validate()
    streams = RngStreams(config.seed)
    n = config.n_segments
    if config.edges is not None:
        edges = [(a, b, float(d)) for a, b, d in config.edges]
        ids = []
        for a, b, _ in edges:
            for s in (a, b):
                if s not in ids:
                    ids.append(s)
        if len(ids) != n:
            raise ConfigError(f"explicit edge list names {len(ids)} segments, config says {n}")
    else:
        ids, edges = random_river(n, config.max_in_degree, streams.fresh("topology"))
    order = _topo_order(ids, edges)
    ups = _upstream_weights(ids, edges)

    start = np.datetime64(config.start, "D")
    end = np.datetime64(f"{int(config.start[:4]) + config.years}{config.start[4:]}", "D")
    dates = np.arange(start, end)
    T = dates.size
    day0 = int((start - start.astype("datetime64[Y]")).astype(int))

    grng = streams.fresh("geometry")
    depth = np.zeros(n)
    pos = {s: k for k, s in enumerate(ids)}
    for k in reversed(order):  # outlet last in topo order, walk from it upstream
        down = [pos[b] for a, b, _ in edges if pos[a] == k]
        depth[k] = depth[down[0]] + 1 if down else 0
    geo = {
        "elevation": depth / max(depth.max(), 1) + grng.normal(0, 0.1, n),
        "length": grng.uniform(0.2, 1.0, n),
        "slope": grng.uniform(0.0, 1.0, n),
    }
    doy, air, precip = _drivers(n, T, day0, geo, streams.fresh("weather"))

    prng = streams.fresh("dynamics")
    rate = 0.12 + 0.4 * geo["slope"] * (1.2 - geo["length"]) + prng.uniform(0, 0.05, n)
    gw_temp = 9.0 + prng.normal(0.0, 1.0, n)
    gw_share = 0.15 + 0.35 * (1.0 - geo["slope"])
    recess = 0.05 + 0.25 * geo["slope"]
    area = 1.0 + 4.0 * geo["length"]

    nrng = streams.fresh("noise")
    noise = nrng.normal(0.0, 1.0, size=(n, T)) * config.noise
    a = config.advection
    truth = np.zeros((n, T))
    if config.target == "temperature":
        local = np.zeros((n, T))
        lt = gw_temp.copy()
        for t in range(T):
            lt = lt + rate * (air[:, t] - lt) - 0.08 * precip[:, t]
            local[:, t] = (1 - gw_share) * lt + gw_share * gw_temp
        for t in range(T):
            for i in order:
                js, w = ups[i]
                if js and a > 0 and t > 0:
                    val = (1 - a) * local[i, t] + a * (w @ truth[js, t - 1])
                else:
                    val = local[i, t]
                truth[i, t] = val + noise[i, t]
        np.clip(truth, *TEMP_RANGE, out=truth)
    else:
        store = np.zeros(n)
        for t in range(T):
            store = (1 - recess) * store + precip[:, t] * area
            local = recess * store
            for i in order:
                js, _ = ups[i]
                inflow = truth[js, t - 1].sum() if (js and t > 0) else 0.0
                truth[i, t] = max(local[i] + a * inflow + noise[i, t], 0.0)

    features = np.empty((n, T, len(FEATURES)))
    features[:, :, 0] = air
    features[:, :, 1] = precip
    features[:, :, 2] = np.sin(2 * np.pi * doy / 365.25)[None, :]
    features[:, :, 3] = np.cos(2 * np.pi * doy / 365.25)[None, :]
    features[:, :, 4] = geo["elevation"][:, None]
    features[:, :, 5] = geo["length"][:, None]
    features[:, :, 6] = geo["slope"][:, None]

    fr = config.obs_fraction
    if np.ndim(fr) == 0:
        fractions = np.full(n, float(fr))
    else:
        lo, hi = fr
        fractions = streams.fresh("obs-fraction").uniform(lo, hi, n)
    observed = sparsify(truth, fractions, streams.fresh("sparsify"))
    params = dict(rate=rate, gw_temp=gw_temp, gw_share=gw_share, recess=recess, area=area,
                  fractions=fractions, advection=a)
    return SynthBasin(config, tuple(ids), edges, dates, features, truth, observed, params)


def sparsify(dense: np.ndarray, fractions, rng: np.random.Generator) -> np.ndarray:
    """Keep ``round(fraction * T)`` uniformly chosen days per segment; NaN elsewhere."""
    dense = np.asarray(dense, dtype=np.float64)
    n, T = dense.shape
    fr = np.broadcast_to(np.asarray(fractions, dtype=np.float64), (n,))
    if np.any((fr < 0) | (fr > 1)):
        raise ConfigError("observation fractions must lie in [0, 1]")
    out = np.full_like(dense, np.nan)
    for i in range(n):
        avail = np.flatnonzero(np.isfinite(dense[i]))
        k = int(round(fr[i] * avail.size))
        keep = rng.choice(avail, size=k, replace=False) if k < avail.size else avail
        out[i, keep] = dense[i, keep]
    return out


def simulate_physics(basin: SynthBasin, bias: float = 0.25, seed: int = 1) -> np.ndarray:
    """Dense targets from an imperfect copy of the generator.

    Same drivers and topology, perturbed process parameters and no noise:
    plays the role of a process model's simulation for policy pretraining.
    """
    cfg = replace(basin.config, noise=0.0, seed=basin.config.seed,
                  advection=float(np.clip(basin.config.advection * (1 + bias), 0, 1)))
    sim = generate_basin(cfg)
    rng = np.random.default_rng(seed)
    scale = 1.0 + bias * rng.uniform(-1, 1)
    offset = bias * rng.normal(0.0, 2.0 if cfg.target == "temperature" else 0.5)
    out = sim.truth * scale + offset
    if cfg.target == "temperature":
        np.clip(out, *TEMP_RANGE, out=out)
    else:
        np.maximum(out, 0.0, out=out)
    return out


# ---------------------------------------------------------------------------
# CSV writers shared with the experiment ingestion


def write_features_csv(path, segment_ids: Sequence, dates, features: np.ndarray, names=None) -> None:
    D = features.shape[2]
    names = list(names or [f"f{k + 1}" for k in range(D)])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "segment_id", *names])
        for t, d in enumerate(np.asarray(dates, dtype="datetime64[D]")):
            ds = str(d)
            for i, s in enumerate(segment_ids):
                w.writerow([ds, s, *(repr(float(v)) for v in features[i, t])])


def write_observations_csv(path, segment_ids: Sequence, dates, labels: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "segment_id", "value"])
        dates = np.asarray(dates, dtype="datetime64[D]")
        for t, d in enumerate(dates):
            for i, s in enumerate(segment_ids):
                v = labels[i, t]
                if np.isfinite(v):
                    w.writerow([str(d), s, repr(float(v))])
