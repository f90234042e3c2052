"""Small numerical layer: activations, parameter storage, seeded streams,
Adam, dropout masks and finite-difference gradient checking.

Everything is float64.  Arrays are plain numpy arrays; the ``Matrix`` of the
design notes is simply a 2-d ``np.ndarray``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Mapping

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

DTYPE = np.float64


def check_finite(arr, what: str = "array") -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{what}: {bad} non-finite value(s)")
    return arr


def affine(W, x, b) -> np.ndarray:
    W = np.asarray(W, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise DimensionError("affine expects a matrix, a vector and a vector")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise DimensionError(
            f"affine shape mismatch: W{W.shape} x({x.shape[0]}) b({b.shape[0]})"
        )
    with np.errstate(invalid="ignore", over="ignore"):
        out = W @ x + b
    return check_finite(out, "affine output")


def tanh_vec(x) -> np.ndarray:
    return check_finite(np.tanh(np.asarray(x, dtype=DTYPE)), "tanh")


def sigmoid_vec(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x))
    return check_finite(out, "sigmoid")


def tanh_grad(x) -> np.ndarray:
    t = np.tanh(np.asarray(x, dtype=DTYPE))
    return 1.0 - t * t


def sigmoid_grad(x) -> np.ndarray:
    s = sigmoid_vec(x)
    return s * (1.0 - s)


# ---------------------------------------------------------------------------
# seeded randomness


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStreams:
    """Named, independent random streams derived from one root seed.

    Streams are Philox (counter based) generators keyed by ``crc32(name)``, so
    adding a new consumer never shifts the draws seen by existing ones.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: Dict[str, np.random.Generator] = {}

    def fresh(self, name: str) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(_stream_key(name),))
        return np.random.Generator(np.random.Philox(ss))

    def get(self, name: str) -> np.random.Generator:
        if name not in self._cache:
            self._cache[name] = self.fresh(name)
        return self._cache[name]

    def child(self, name: str) -> "RngStreams":
        """A new family of streams, deterministic in (seed, name)."""
        sub = int(self.fresh("child:" + name).integers(0, 2**62))
        return RngStreams(sub)


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    r = 1.0 / np.sqrt(max(int(fan_in), 1))
    return rng.uniform(-r, r, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter arrays with one gradient buffer each."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=DTYPE)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def names(self):
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def load(self, other: "ParamStore | Mapping[str, np.ndarray]") -> None:
        src = other.params if isinstance(other, ParamStore) else other
        for k, v in src.items():
            if self.params[k].shape != np.shape(v):
                raise DimensionError(f"parameter {k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k][...] = v

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def clip_grads(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NumericalError("gradient norm is not finite")
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


@dataclass
class Adam:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, store: ParamStore) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in store.params.items():
            g = store.grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()


# ---------------------------------------------------------------------------
# dropout


@dataclass(frozen=True)
class DropoutMask:
    keep: float
    mask: np.ndarray
    scale: float

    @property
    def scaled(self) -> np.ndarray:
        return self.mask * self.scale


def sample_dropout_mask(keep: float, size, rng: np.random.Generator | None) -> DropoutMask:
    """Bernoulli(keep) mask with inverted-dropout scale ``1/keep``."""
    if not (0.0 < keep <= 1.0):
        raise ConfigError(f"keep probability must lie in (0, 1], got {keep}")
    if keep == 1.0:
        return DropoutMask(1.0, np.ones(size, dtype=DTYPE), 1.0)
    if rng is None:
        raise ConfigError("a random generator is required when keep < 1")
    mask = (rng.random(size) < keep).astype(DTYPE)
    return DropoutMask(keep, mask, 1.0 / keep)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names=None,
) -> float:
    """Largest relative gap between ``analytic`` and central differences.

    The gap for one entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    worst = 0.0
    for name in names or store.names():
        p = store.params[name]
        a = np.asarray(analytic[name])
        if a.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {a.shape}, expected {p.shape}")
        flat = p.reshape(-1)
        aflat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f(store))
            flat[k] = orig - h
            fm = float(f(store))
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"objective not finite while perturbing {name}[{k}]")
            num = (fp - fm) / (2.0 * h)
            err = abs(aflat[k] - num) / max(1.0, abs(aflat[k]), abs(num))
            worst = max(worst, err)
    return worst
