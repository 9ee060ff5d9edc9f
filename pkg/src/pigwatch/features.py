"""PIG indicator target and rolling head-loss features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .series import (SegmentMeta, UniformSeries, atomic_write_text, fmt,
                     slice_interval)

WINDOWS_H = (8, 16, 24)
FEATURE_NAMES = tuple(f"{stat}{w}" for w in WINDOWS_H for stat in ("mean", "min", "max"))
DATASET_HEADER = "t_us," + ",".join(FEATURE_NAMES) + ",target"
MIN_TRAIN_BINS = 1000


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class MappingConfig:
    h_lo: float
    h_hi: float
    lo_percentile: float = 1.0
    hi_percentile: float = 99.0

    def __post_init__(self):
        if not self.h_lo < self.h_hi:
            raise FeatureError(f"mapping needs h_lo < h_hi (got {self.h_lo}, {self.h_hi})")
        if not (0 <= self.lo_percentile < 100 and 0 <= self.hi_percentile < 100):
            raise FeatureError("percentiles must lie in [0, 100)")


def fit_mapping(long_term: UniformSeries, train_from: int, train_to: int,
                lo_percentile: float = 1.0, hi_percentile: float = 99.0) -> MappingConfig:
    """Anchor the indicator at the given percentiles of the training-span head loss."""
    train = slice_interval(long_term, train_from, train_to)
    vals = train.values[~train.missing]
    if vals.size < MIN_TRAIN_BINS:
        raise FeatureError(f"training span holds {vals.size} valid bins, need {MIN_TRAIN_BINS}")
    lo, hi = np.percentile(vals, [lo_percentile, hi_percentile])
    if not lo < hi:
        raise FeatureError("training head loss is constant; cannot scale the indicator")
    return MappingConfig(float(lo), float(hi), lo_percentile, hi_percentile)


def apply_mapping(h: np.ndarray, m: MappingConfig) -> np.ndarray:
    return np.clip((np.asarray(h, dtype=np.float64) - m.h_lo) / (m.h_hi - m.h_lo), 0.0, 1.0)


@dataclass(frozen=True)
class PigIndicatorSeries:
    segment: SegmentMeta
    y: UniformSeries


def build_pig_indicator(long_term: UniformSeries, m: MappingConfig,
                        segment: SegmentMeta | None = None) -> PigIndicatorSeries:
    """Clamp-rescale long-term head loss to [0, 1]; MISSING is preserved."""
    return PigIndicatorSeries(segment, long_term.replace_values(apply_mapping(long_term.values, m)))


@dataclass(frozen=True)
class FeatureTable:
    """Emitted feature rows: ``values[i]`` is (mean, min, max) x (8 h, 16 h, 24 h) at ``t_us[i]``."""

    t_us: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.t_us.size)


def rolling_features(short_term: UniformSeries, windows_h=WINDOWS_H,
                     min_coverage: float = 0.5) -> FeatureTable:
    """Trailing mean/min/max of short-term head loss over each window.

    A window with less than ``min_coverage`` of its bins present yields no
    value, and rows lacking any of the nine values are not emitted.
    """
    step = short_term.step_s
    cols = []
    s = pd.Series(short_term.values)
    for w in windows_h:
        n = w * 3600.0 / step
        if abs(n - round(n)) > 1e-9:
            raise FeatureError(f"grid step {step} s does not divide the {w} h window")
        n = int(round(n))
        roll = s.rolling(n, min_periods=int(np.ceil(min_coverage * n)))
        mean = roll.mean().to_numpy()
        lo = roll.min().to_numpy()
        hi = roll.max().to_numpy()
        # rolling sums drift by a few ulps; the mean of a window cannot leave its range
        mean = np.clip(mean, lo, hi)
        cols += [mean, lo, hi]
    values = np.column_stack(cols)
    ok = ~np.isnan(values).any(axis=1)
    return FeatureTable(short_term.times_us[ok], values[ok])


@dataclass(frozen=True)
class Dataset:
    segment: str
    t_us: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.t_us.size)

    def slice(self, from_us: int, to_us: int) -> "Dataset":
        sel = (self.t_us >= from_us) & (self.t_us < to_us)
        return Dataset(self.segment, self.t_us[sel], self.X[sel], self.y[sel])


def assemble_dataset(features: FeatureTable, y: PigIndicatorSeries | UniformSeries,
                     segment: str | None = None) -> Dataset:
    """Inner-join feature rows with non-MISSING targets on timestamp."""
    ind = y.y if isinstance(y, PigIndicatorSeries) else y
    if segment is None and isinstance(y, PigIndicatorSeries) and y.segment is not None:
        segment = y.segment.name
    k = (features.t_us - ind.start_us) // ind.step_us
    on_grid = ((features.t_us - ind.start_us) % ind.step_us == 0) & (k >= 0) & (k < len(ind))
    target = np.full(len(features), np.nan)
    target[on_grid] = ind.values[k[on_grid]]
    ok = ~np.isnan(target)
    if not ok.any():
        raise FeatureError(f"segment {segment}: features and targets share no timestamps")
    return Dataset(segment or "", features.t_us[ok], features.values[ok], target[ok])


def write_dataset_csv(path, ds: Dataset) -> None:
    lines = [DATASET_HEADER]
    for t, row, target in zip(ds.t_us, ds.X, ds.y):
        lines.append(f"{int(t)}," + ",".join(fmt(v) for v in row) + f",{fmt(target)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dataset_csv(path, segment: str = "") -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != DATASET_HEADER:
        raise FeatureError(f"{path}: column order differs from the model contract")
    dtypes = {"t_us": np.int64, **{n: np.float64 for n in FEATURE_NAMES + ("target",)}}
    frame = pd.read_csv(path, float_precision="round_trip", dtype=dtypes)
    X = frame[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
    y = frame["target"].to_numpy(dtype=np.float64)
    return Dataset(segment, frame["t_us"].to_numpy(dtype=np.int64), X, y)


def check_feature_order(values: np.ndarray) -> bool:
    """min <= mean <= max for every window triple, and longer windows nest shorter ones."""
    v = np.asarray(values).reshape(-1, 3, 3)
    mean, lo, hi = v[:, :, 0], v[:, :, 1], v[:, :, 2]
    ordered = np.all(lo <= mean) and np.all(mean <= hi)
    nested = np.all(np.diff(lo, axis=1) <= 0) and np.all(np.diff(hi, axis=1) >= 0)
    return bool(ordered and nested)
