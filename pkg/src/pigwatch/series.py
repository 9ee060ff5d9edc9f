"""Time-series containers, CSV ingestion, uniform resampling and gap bookkeeping.

Timestamps are integer microseconds since the Unix epoch (UTC). A
``UniformSeries`` stores MISSING bins as NaN; every other value is finite.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

US_PER_S = 1_000_000


class SeriesError(ValueError):
    """Raised for malformed or inconsistent series input."""


class ChannelKind(enum.Enum):
    STATIC_BAR = "static"
    DYNAMIC_KPA = "dynamic"

    @classmethod
    def parse(cls, name: str | "ChannelKind") -> "ChannelKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {"static": cls.STATIC_BAR, "staticbar": cls.STATIC_BAR,
                   "dynamic": cls.DYNAMIC_KPA, "dynamickpa": cls.DYNAMIC_KPA}
        if key not in aliases:
            raise SeriesError(f"unknown channel {name!r}")
        return aliases[key]


class Reducer(enum.Enum):
    MEAN = "mean"
    MIN = "min"
    MAX = "max"


def to_us(value: str | datetime | int) -> int:
    """Convert an ISO-8601 string, datetime or int to epoch microseconds (UTC)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        value = datetime.fromisoformat(text)
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    delta = value - datetime(1970, 1, 1, tzinfo=timezone.utc)
    return (delta.days * 86400 + delta.seconds) * US_PER_S + delta.microseconds


def iso(t_us: int) -> str:
    secs, micros = divmod(int(t_us), US_PER_S)
    dt = datetime.fromtimestamp(secs, tz=timezone.utc).replace(microsecond=micros)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ") if micros == 0 else dt.isoformat()


@dataclass(frozen=True)
class StationMeta:
    id: str
    chainage_km: float
    altitude_m: float

    def __post_init__(self):
        if self.chainage_km < 0:
            raise SeriesError(f"station {self.id}: negative chainage")


@dataclass(frozen=True)
class SegmentMeta:
    upstream: str
    downstream: str
    length_km: float

    def __post_init__(self):
        if not self.length_km > 0:
            raise SeriesError(f"segment {self.name}: length must be positive")

    @property
    def name(self) -> str:
        return f"{self.upstream}-{self.downstream}"

    @classmethod
    def between(cls, up: StationMeta, down: StationMeta) -> "SegmentMeta":
        return cls(up.id, down.id, abs(down.chainage_km - up.chainage_km))


def validate_stations(stations: Sequence[StationMeta]) -> None:
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        raise SeriesError("duplicate station ids")
    if sum(1 for s in stations if s.chainage_km == 0) != 1:
        raise SeriesError("exactly one station must sit at chainage 0")


def all_segments(stations: Sequence[StationMeta]) -> list[SegmentMeta]:
    """Every ordered (upstream, downstream) pair, longest span first then by name."""
    ordered = sorted(stations, key=lambda s: s.chainage_km)
    segs = [SegmentMeta.between(u, d)
            for i, u in enumerate(ordered) for d in ordered[i + 1:]]
    return sorted(segs, key=lambda s: (-s.length_km, s.name))


@dataclass(frozen=True)
class PressureSeries:
    station: str
    channel: ChannelKind
    t_us: np.ndarray
    values: np.ndarray
    nominal_rate_hz: float

    def __post_init__(self):
        t = np.asarray(self.t_us, dtype=np.int64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise SeriesError("timestamps and values must be 1-D and equally long")
        if not self.nominal_rate_hz > 0:
            raise SeriesError("nominal_rate_hz must be positive")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise SeriesError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise SeriesError("values must be finite")
        object.__setattr__(self, "t_us", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.t_us.size)

    def with_samples(self, t_us: np.ndarray, values: np.ndarray) -> "PressureSeries":
        return PressureSeries(self.station, self.channel, t_us, values, self.nominal_rate_hz)


@dataclass(frozen=True)
class UniformSeries:
    """Values on the grid ``start_us + k * step``; NaN marks a MISSING bin."""

    start_us: int
    step_s: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.step_s > 0:
            raise SeriesError("step_s must be positive")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise SeriesError("values must be 1-D")
        if np.any(np.isinf(v)):
            raise SeriesError("values must be finite or NaN")
        object.__setattr__(self, "start_us", int(self.start_us))
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def step_us(self) -> int:
        return int(round(self.step_s * US_PER_S))

    @property
    def end_us(self) -> int:
        """Exclusive end of the last bin."""
        return self.start_us + len(self) * self.step_us

    @property
    def times_us(self) -> np.ndarray:
        return self.start_us + np.arange(len(self), dtype=np.int64) * self.step_us

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def replace_values(self, values: np.ndarray) -> "UniformSeries":
        return UniformSeries(self.start_us, self.step_s, values)

    def same_grid(self, other: "UniformSeries") -> bool:
        return (self.start_us == other.start_us and self.step_us == other.step_us
                and len(self) == len(other))


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

CSV_HEADER = ("timestamp_us", "value")


def load_csv_series(path: str | os.PathLike, station: str, channel: ChannelKind | str,
                    nominal_rate_hz: float | None = None) -> PressureSeries:
    """Read a ``timestamp_us,value`` file into a PressureSeries.

    Rows are numbered from 1 after the header. Any malformed row or a
    timestamp that does not strictly increase raises SeriesError naming the
    row and its line number; nothing is reordered or repaired.
    """
    channel = ChannelKind.parse(channel)
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n")
    if tuple(h.strip() for h in header.split(",")) != CSV_HEADER:
        raise SeriesError(f"{path}: line 1: expected header 'timestamp_us,value'")
    try:
        frame = pd.read_csv(path, float_precision="round_trip",
                            dtype={"timestamp_us": np.int64, "value": np.float64},
                            engine="c", skip_blank_lines=False)
        t_arr = frame["timestamp_us"].to_numpy()
        v_arr = frame["value"].to_numpy()
        ok = frame.shape[1] == 2 and bool(np.all(np.isfinite(v_arr)))
    except (ValueError, pd.errors.ParserError):
        ok = False
    if not ok:
        t_arr, v_arr = _load_rows_strict(path)
    bad = np.flatnonzero(np.diff(t_arr) <= 0)
    if bad.size:
        row_no = int(bad[0]) + 2
        what = "duplicate" if t_arr[bad[0] + 1] == t_arr[bad[0]] else "non-monotonic"
        raise SeriesError(f"{path}: row {row_no} (line {row_no + 1}): {what} timestamp")
    if nominal_rate_hz is None:
        nominal_rate_hz = _estimate_rate(t_arr)
    return PressureSeries(station, channel, t_arr, v_arr, nominal_rate_hz)


def _load_rows_strict(path: Path) -> tuple[np.ndarray, np.ndarray]:
    t: list[int] = []
    v: list[float] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row_no, row in enumerate(reader, start=1):
            line_no = row_no + 1
            if len(row) != 2:
                raise SeriesError(f"{path}: row {row_no} (line {line_no}): expected 2 fields")
            try:
                ts = int(row[0])
                val = float(row[1])
            except ValueError:
                raise SeriesError(
                    f"{path}: row {row_no} (line {line_no}): unparsable field") from None
            if not math.isfinite(val):
                raise SeriesError(f"{path}: row {row_no} (line {line_no}): non-finite value")
            t.append(ts)
            v.append(val)
    return np.array(t, dtype=np.int64), np.array(v, dtype=np.float64)


def _estimate_rate(t_us: np.ndarray) -> float:
    if t_us.size < 2:
        return 1.0
    return US_PER_S / float(np.median(np.diff(t_us)))


def fmt(value: float) -> str:
    """Shortest round-tripping decimal text; empty for NaN (MISSING)."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv_series(path: str | os.PathLike, s: PressureSeries) -> None:
    lines = [",".join(CSV_HEADER)]
    lines.extend(f"{int(t)},{fmt(v)}" for t, v in zip(s.t_us, s.values))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_uniform_csv(path: str | os.PathLike, u: UniformSeries,
                      header: str = "bin_start_us,value") -> None:
    lines = [header]
    lines.extend(f"{int(t)},{fmt(v)}" for t, v in zip(u.times_us, u.values))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_grid_csv(path: str | os.PathLike, header: str) -> tuple[int, float, np.ndarray]:
    """Load a grid CSV (first column bin start in us, empty field = MISSING).

    Returns ``(start_us, step_s, columns)`` where ``columns`` is an (n, k)
    float array of the remaining columns.
    """
    with open(path, encoding="utf-8") as fh:
        found = fh.readline().strip()
    if found != header:
        raise SeriesError(f"{path}: expected header {header!r}, found {found!r}")
    names = header.split(",")
    dtypes = {n: (np.int64 if i == 0 else np.float64) for i, n in enumerate(names)}
    frame = pd.read_csv(path, float_precision="round_trip", dtype=dtypes)
    t = frame.iloc[:, 0].to_numpy(dtype=np.int64)
    if t.size < 2:
        raise SeriesError(f"{path}: need at least two bins to infer the grid step")
    steps = np.diff(t)
    if np.any(steps != steps[0]):
        raise SeriesError(f"{path}: bins are not uniformly spaced")
    return int(t[0]), steps[0] / US_PER_S, frame.iloc[:, 1:].to_numpy(dtype=np.float64)


def read_uniform_csv(path: str | os.PathLike, header: str = "bin_start_us,value") -> UniformSeries:
    start, step, cols = read_grid_csv(path, header)
    return UniformSeries(start, step, cols[:, 0])


# ---------------------------------------------------------------------------
# Resampling, gaps, slicing
# ---------------------------------------------------------------------------

def grid_start(t_us: int, step_s: float) -> int:
    """Largest epoch-aligned grid point not after ``t_us``."""
    step_us = int(round(step_s * US_PER_S))
    return (int(t_us) // step_us) * step_us


def _bin_index(s: PressureSeries, step_us: int, start_us: int) -> np.ndarray:
    return (s.t_us - start_us) // step_us


def resample_uniform(s: PressureSeries, step_s: float = 60.0,
                     reducer: Reducer | str = Reducer.MEAN,
                     start_us: int | None = None, end_us: int | None = None) -> UniformSeries:
    """Bin samples onto a uniform grid.

    Bin ``k`` covers ``[start + k*step, start + (k+1)*step)`` and holds the
    reduced value of the samples inside it, or NaN when it is empty. The grid
    origin defaults to the epoch-aligned bin containing the first sample, so
    series from different stations land on a common grid; samples outside
    ``[start_us, end_us)`` are dropped.
    """
    if not step_s > 0:
        raise SeriesError("step_s must be positive")
    reducer = Reducer(reducer)
    step_us = int(round(step_s * US_PER_S))
    if start_us is None:
        if len(s) == 0:
            return UniformSeries(0, step_s, np.empty(0))
        start_us = grid_start(int(s.t_us[0]), step_s)
    if end_us is None:
        n_bins = 0 if len(s) == 0 else int((s.t_us[-1] - start_us) // step_us) + 1
    else:
        n_bins = max(0, -(-(int(end_us) - start_us) // step_us))
    out = np.full(n_bins, np.nan)
    if n_bins == 0 or len(s) == 0:
        return UniformSeries(start_us, step_s, out)
    idx = _bin_index(s, step_us, start_us)
    keep = (idx >= 0) & (idx < n_bins)
    idx, vals = idx[keep], s.values[keep]
    if idx.size == 0:
        return UniformSeries(start_us, step_s, out)
    # idx is non-decreasing because timestamps are strictly increasing
    run_starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    bins = idx[run_starts]
    if reducer is Reducer.MEAN:
        counts = np.diff(np.r_[run_starts, idx.size])
        out[bins] = np.add.reduceat(vals, run_starts) / counts
    elif reducer is Reducer.MIN:
        out[bins] = np.minimum.reduceat(vals, run_starts)
    else:
        out[bins] = np.maximum.reduceat(vals, run_starts)
    return UniformSeries(start_us, step_s, out)


def bin_counts(s: PressureSeries, u: UniformSeries) -> np.ndarray:
    """Number of raw samples of ``s`` falling in each bin of ``u``'s grid."""
    idx = _bin_index(s, u.step_us, u.start_us)
    idx = idx[(idx >= 0) & (idx < len(u))]
    return np.bincount(idx, minlength=len(u))


def detect_gaps(u: UniformSeries) -> list[tuple[int, int]]:
    """Maximal runs of MISSING bins as inclusive ``(first, last)`` index pairs."""
    miss = u.missing.astype(np.int8)
    if miss.size == 0:
        return []
    edges = np.diff(np.r_[0, miss, 0])
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def slice_interval(u: UniformSeries, from_us: int, to_us: int) -> UniformSeries:
    """Bins whose start time lies in ``[from_us, to_us)``, keeping grid alignment."""
    from_us, to_us = int(from_us), int(to_us)
    if from_us >= to_us:
        raise SeriesError("slice_interval requires from < to")
    step = u.step_us
    lo = max(0, -(-(from_us - u.start_us) // step))
    hi = min(len(u), max(0, -(-(to_us - u.start_us) // step)))
    if hi <= lo:
        first = u.start_us + lo * step if lo > 0 else from_us
        return UniformSeries(first, u.step_s, np.empty(0))
    return UniformSeries(u.start_us + lo * step, u.step_s, u.values[lo:hi].copy())


def align_to(u: UniformSeries, start_us: int, n: int) -> UniformSeries:
    """Re-window ``u`` onto ``n`` bins starting at ``start_us`` (same step), padding with NaN."""
    step = u.step_us
    offset = int(start_us) - u.start_us
    if offset % step:
        raise SeriesError("target grid is not aligned with the series grid")
    k0 = offset // step
    out = np.full(n, np.nan)
    src_lo, src_hi = max(0, k0), min(len(u), k0 + n)
    if src_hi > src_lo:
        out[src_lo - k0:src_hi - k0] = u.values[src_lo:src_hi]
    return UniformSeries(start_us, u.step_s, out)
