"""River segment graphs and the structural node statistics used by UDC."""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, GraphError, UnknownSegmentError

VARIANTS = ("downstream", "direct", "none")


@dataclass(frozen=True)
class RiverGraph:
    """Weighted directed segment graph; edges point downstream.

    ``W[i, j]`` is the adjacency weight of edge ``i -> j`` (zero when absent).
    """

    segment_ids: tuple
    edges: tuple  # ((i, j, distance_m), ...) in index space, sorted
    variant: str
    W: np.ndarray

    @property
    def n(self) -> int:
        return len(self.segment_ids)

    def index(self, seg) -> int:
        try:
            return self.segment_ids.index(seg)
        except ValueError:
            raise UnknownSegmentError(seg) from None

    def incoming(self):
        """CSR view of incoming edges: (indptr, src, weight)."""
        n = self.n
        rows = [[] for _ in range(n)]
        for i, j, _ in self.edges:
            rows[j].append(i)
        indptr = np.zeros(n + 1, dtype=np.intp)
        src, w = [], []
        for j in range(n):
            for i in sorted(rows[j]):
                src.append(i)
                w.append(self.W[i, j])
            indptr[j + 1] = len(src)
        return indptr, np.asarray(src, dtype=np.intp), np.asarray(w, dtype=np.float64)

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n)
        for i, j, _ in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


def _downstream_closure(n: int, direct: dict) -> dict:
    """Shortest stream distance from every segment to each segment below it."""
    out = {}
    for src in range(n):
        dist = {src: 0.0}
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, np.inf):
                continue
            for v, w in direct.get(u, ()):
                nd = d + w
                if nd < dist.get(v, np.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        for v, d in dist.items():
            if v != src:
                out[(src, v)] = d
    return out


def adjacency_weights(n: int, edges: Sequence) -> np.ndarray:
    """``1 / (1 + exp(z))`` on edges, with z the z-scored stream distance."""
    W = np.zeros((n, n))
    if not edges:
        return W
    d = np.array([e[2] for e in edges], dtype=np.float64)
    sd = d.std()
    z = np.zeros_like(d) if sd == 0.0 else (d - d.mean()) / sd
    w = 1.0 / (1.0 + np.exp(z))
    for (i, j, _), wij in zip(edges, w):
        W[i, j] = wij
    return W


def build_graph(edges: Iterable, variant: str = "downstream", segment_ids: Sequence | None = None) -> RiverGraph:
    """Build a graph from direct ``(from_id, to_id, distance_m)`` edges.

    ``downstream`` adds an edge from every segment to every segment reachable
    below it (distance = path length), ``direct`` keeps the input edges and
    ``none`` drops them all.
    """
    if variant not in VARIANTS:
        raise GraphError(f"unknown graph variant {variant!r}; expected one of {VARIANTS}")
    edges = [(a, b, float(d)) for a, b, d in edges]
    if segment_ids is None:
        seen = {}
        for a, b, _ in edges:
            seen.setdefault(a, None)
            seen.setdefault(b, None)
        segment_ids = list(seen)
    segment_ids = tuple(segment_ids)
    if len(set(segment_ids)) != len(segment_ids):
        raise GraphError("duplicate segment ids")
    pos = {s: k for k, s in enumerate(segment_ids)}

    direct: dict = {}
    ts = TopologicalSorter({k: () for k in range(len(segment_ids))})
    for a, b, d in edges:
        for s in (a, b):
            if s not in pos:
                raise UnknownSegmentError(s)
        if not np.isfinite(d) or d <= 0:
            raise GraphError(f"edge {a}->{b}: distance must be positive, got {d}")
        if a == b:
            raise GraphError(f"self-loop on segment {a}")
        i, j = pos[a], pos[b]
        direct.setdefault(i, []).append((j, d))
        ts.add(j, i)
    try:
        ts.prepare()
    except CycleError as exc:
        cyc = [segment_ids[k] for k in exc.args[1]]
        raise GraphError(f"river graph contains a cycle: {cyc}") from None

    if variant == "none":
        kept = []
    elif variant == "direct":
        best = {}
        for i, lst in direct.items():
            for j, d in lst:
                best[(i, j)] = min(d, best.get((i, j), np.inf))
        kept = sorted((i, j, d) for (i, j), d in best.items())
    else:
        kept = sorted((i, j, d) for (i, j), d in _downstream_closure(len(segment_ids), direct).items())
    W = adjacency_weights(len(segment_ids), kept)
    W.setflags(write=False)
    return RiverGraph(segment_ids, tuple(kept), variant, W)


@dataclass(frozen=True)
class NodeStats:
    centrality: np.ndarray
    density: np.ndarray


def degree_centrality(graph: RiverGraph) -> np.ndarray:
    deg = graph.degree()
    top = deg.max() if deg.size else 0.0
    return deg / top if top > 0 else np.zeros_like(deg)


def feature_density(features: np.ndarray) -> np.ndarray:
    """Mean pairwise cosine similarity of time-averaged features, mapped to [0, 1].

    ``features`` is ``(N, T, D)``.  Pairs involving an all-zero vector add 0.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[1] == 0:
        raise DataError("node statistics need a non-empty (N, T, D) feature window")
    avg = feats.mean(axis=1)
    n = avg.shape[0]
    if n < 2:
        return np.zeros(n)
    norm = np.linalg.norm(avg, axis=1)
    ok = norm > 0
    unit = np.zeros_like(avg)
    unit[ok] = avg[ok] / norm[ok, None]
    sim = (1.0 + unit @ unit.T) / 2.0
    valid = ok[:, None] & ok[None, :]
    np.fill_diagonal(valid, False)
    sim = np.where(valid, sim, 0.0)
    return sim.sum(axis=1) / (n - 1)


def node_stats(graph: RiverGraph, features: np.ndarray) -> NodeStats:
    return NodeStats(degree_centrality(graph), feature_density(features))


# ---------------------------------------------------------------------------
# edge-list CSV: from_id,to_id,distance_m

EDGE_HEADER = ("from_id", "to_id", "distance_m")


def read_edges_csv(path) -> list:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EDGE_HEADER:
            raise DataError(f"{path}: header must be {','.join(EDGE_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            try:
                out.append((row[0].strip(), row[1].strip(), float(row[2])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad distance {row[2]!r}") from None
    return out


def write_edges_csv(path, edges) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_HEADER)
        for a, b, d in edges:
            w.writerow([a, b, repr(float(d))])
