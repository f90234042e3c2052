"""Panel data: per-segment daily features plus sparse observations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

TARGET_KINDS = ("temperature", "flow")


@dataclass
class PanelData:
    """Standardized features ``(N, T, D)`` and labels ``(N, T)`` (NaN = unobserved).

    ``feat_mean``/``feat_std`` and ``target_mean``/``target_std`` undo the
    standardization; ``truth`` optionally holds dense simulated targets (also
    standardized) for synthetic basins.
    """

    segment_ids: tuple
    dates: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    target: str = "temperature"
    feat_mean: np.ndarray = field(default=None)
    feat_std: np.ndarray = field(default=None)
    target_mean: float = 0.0
    target_std: float = 1.0
    truth: Optional[np.ndarray] = None
    feature_names: tuple = ()

    def __post_init__(self):
        self.segment_ids = tuple(self.segment_ids)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.target not in TARGET_KINDS:
            raise DataError(f"unknown target kind {self.target!r}")
        N, T, D = self.features.shape
        if len(self.segment_ids) != N or self.dates.shape != (T,):
            raise DataError("segment ids / dates do not match the feature array")
        if self.labels.shape != (N, T):
            raise DataError(f"labels must be (N, T) = {(N, T)}, got {self.labels.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if self.feat_mean is None:
            self.feat_mean = np.zeros(D)
            self.feat_std = np.ones(D)
        self._X = None

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return self.features.shape[1]

    @property
    def D(self) -> int:
        return self.features.shape[2]

    @property
    def X(self) -> np.ndarray:
        """Time-major ``(T, N, D)`` contiguous copy used by the kernels."""
        if self._X is None:
            self._X = np.ascontiguousarray(self.features.transpose(1, 0, 2))
        return self._X

    @property
    def observed(self) -> np.ndarray:
        return np.isfinite(self.labels)

    def n_labels(self, t0: int = 0, t1: int | None = None) -> int:
        return int(self.observed[:, t0:t1].sum())

    def day_index(self, date) -> int:
        d = np.datetime64(date, "D")
        k = int((d - self.dates[0]).astype(int))
        if not 0 <= k < self.T:
            raise DataError(f"date {date} outside data range")
        return k

    def water_year(self) -> np.ndarray:
        """Water year of each day (Oct 1 starts the next year)."""
        years = self.dates.astype("datetime64[Y]").astype(int) + 1970
        months = self.dates.astype("datetime64[M]").astype(int) % 12 + 1
        return years + (months >= 10)

    def to_original(self, z) -> np.ndarray:
        return np.asarray(z) * self.target_std + self.target_mean

    def with_labels(self, labels: np.ndarray) -> "PanelData":
        out = replace(self, labels=np.array(labels, dtype=np.float64))
        out._X = self._X
        return out


def standardize(
    segment_ids: Sequence,
    dates,
    raw_features: np.ndarray,
    raw_labels: np.ndarray,
    target: str = "temperature",
    fit: slice = slice(None),
    raw_truth: np.ndarray | None = None,
    feature_names: Sequence = (),
) -> PanelData:
    """z-score features and targets with statistics from the ``fit`` days."""
    raw_features = np.asarray(raw_features, dtype=np.float64)
    raw_labels = np.asarray(raw_labels, dtype=np.float64)
    fm = raw_features[:, fit].reshape(-1, raw_features.shape[2]).mean(axis=0)
    fs = raw_features[:, fit].reshape(-1, raw_features.shape[2]).std(axis=0)
    fs = np.where(fs > 0, fs, 1.0)
    lab = raw_labels[:, fit]
    pool = lab[np.isfinite(lab)]
    if pool.size == 0 and raw_truth is not None:
        pool = np.asarray(raw_truth)[:, fit].ravel()
    if pool.size == 0:
        pool = raw_labels[np.isfinite(raw_labels)]
    tm = float(pool.mean()) if pool.size else 0.0
    ts = float(pool.std()) if pool.size > 1 else 1.0
    ts = ts if ts > 0 else 1.0
    truth = None if raw_truth is None else (np.asarray(raw_truth, dtype=np.float64) - tm) / ts
    return PanelData(
        segment_ids=tuple(segment_ids),
        dates=dates,
        features=(raw_features - fm) / fs,
        labels=(raw_labels - tm) / ts,
        target=target,
        feat_mean=fm,
        feat_std=fs,
        target_mean=tm,
        target_std=ts,
        truth=truth,
        feature_names=tuple(feature_names),
    )
