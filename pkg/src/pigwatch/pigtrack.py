"""Acoustic PIG tracking from the windowed cross-correlation of two hydrophones.

Geometry: the pump at the upstream station is the dominant noise source.
Lags are the delay of the upstream channel relative to the downstream one,
so the direct pump arrival sits at ``tau0 = -D/c``. A PIG at distance ``x``
from the upstream station reflects pump noise back upstream, which puts a
second ridge at ``tau0 + 2x/c`` that walks towards ``+D/c`` as it travels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

from .series import SegmentMeta, SeriesError, UniformSeries, atomic_write_text, fmt


@dataclass(frozen=True)
class TrackerConfig:
    window_s: float = 60.0
    hop_s: float = 30.0
    max_lag_s: float = 120.0
    sound_speed_m_s: float = 1186.14
    baseline_exclusion_s: float = 2.0
    v_max_m_s: float = 5.0
    min_mean_score: float = 0.3
    # per-column score a path must beat to keep growing; sets where tracks start/end
    score_offset: float = 0.2
    min_track_s: float = 1800.0

    def __post_init__(self):
        if not 0 < self.hop_s <= self.window_s:
            raise ValueError("need 0 < hop_s <= window_s")
        if not self.max_lag_s > 0 or not self.sound_speed_m_s > 0:
            raise ValueError("max_lag_s and sound_speed_m_s must be positive")


def windowed_xcorr(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation of two equal-length windows.

    ``R[l + max_lag] = sum_n a0[n] * b0[n + l] / (N * rms(a0) * rms(b0))`` for
    ``l`` in ``[-max_lag, max_lag]``, with ``a0``/``b0`` the mean-removed
    windows. Positive ``l`` means ``b`` lags ``a``. A zero-variance window
    gives an all-zero result.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    if b.size != n:
        raise ValueError("windows must have equal length")
    if n <= 2 * max_lag:
        raise ValueError("window length must exceed 2 * max_lag")
    a0 = a - a.mean()
    b0 = b - b.mean()
    denom = math.sqrt(float(a0 @ a0) * float(b0 @ b0))
    if denom == 0.0:
        return np.zeros(2 * max_lag + 1)
    nfft = sp_fft.next_fast_len(2 * n)
    cross = np.conj(sp_fft.rfft(a0, nfft)) * sp_fft.rfft(b0, nfft)
    full = sp_fft.irfft(cross, nfft)
    r = np.concatenate((full[nfft - max_lag:], full[:max_lag + 1])) / denom
    return np.clip(r, -1.0, 1.0)


def xcorr_direct(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """Plain-sum reference for :func:`windowed_xcorr`."""
    a0 = np.asarray(a, float) - np.mean(a)
    b0 = np.asarray(b, float) - np.mean(b)
    n = a0.size
    denom = math.sqrt(float(a0 @ a0) * float(b0 @ b0))
    out = np.zeros(2 * max_lag + 1)
    if denom == 0.0:
        return out
    for i, lag in enumerate(range(-max_lag, max_lag + 1)):
        s = 0.0
        for k in range(n):
            if 0 <= k + lag < n:
                s += a0[k] * b0[k + lag]
        out[i] = s / denom
    return out


@dataclass(frozen=True)
class CorrelationMap:
    times_us: np.ndarray          # column centre times
    lags_s: np.ndarray
    values: np.ndarray            # (n_columns, n_lags), entries in [-1, 1]
    flagged: np.ndarray           # columns zero-filled for missing/flat data

    @property
    def lag_step_s(self) -> float:
        return float(self.lags_s[1] - self.lags_s[0]) if self.lags_s.size > 1 else 0.0

    def __len__(self) -> int:
        return int(self.times_us.size)


def build_correlation_map(up: UniformSeries, down: UniformSeries,
                          cfg: TrackerConfig = TrackerConfig()) -> CorrelationMap:
    """Time x lag map of normalized cross-correlation between two dynamic channels.

    Each column correlates a ``window_s`` template of the downstream channel
    against the upstream channel shifted by every lag in ``[-max_lag, +max_lag]``.
    The upstream excerpt is taken afresh for every lag, so each entry is a
    Pearson coefficient over full overlap and ``|R| <= 1`` holds exactly.
    Columns whose data contain MISSING samples or no variance are zero-filled
    and flagged.
    """
    if up.step_us != down.step_us:
        raise SeriesError("dynamic channels must share a sample grid")
    step_s = up.step_s
    start = max(up.start_us, down.start_us)
    end = min(up.end_us, down.end_us)
    if end <= start:
        raise SeriesError("dynamic channels do not overlap in time")
    if (up.start_us - down.start_us) % up.step_us:
        raise SeriesError("dynamic channels are not sample-aligned")
    n = (end - start) // up.step_us
    a = down.values[(start - down.start_us) // down.step_us:][:n]
    b = up.values[(start - up.start_us) // up.step_us:][:n]

    w = int(round(cfg.window_s / step_s))
    hop = max(1, int(round(cfg.hop_s / step_s)))
    lag = int(round(cfg.max_lag_s / step_s))
    lags_s = np.arange(-lag, lag + 1) * step_s
    first = lag
    n_cols = 0 if n < w + 2 * lag else (n - w - 2 * lag) // hop + 1
    if n_cols == 0:
        return CorrelationMap(np.empty(0, dtype=np.int64), lags_s,
                              np.empty((0, lags_s.size)), np.empty(0, dtype=bool))
    offsets = first + hop * np.arange(n_cols)
    tmpl = sliding_window_view(a, w)[offsets]
    search = sliding_window_view(b, w + 2 * lag)[offsets - lag]

    bad = np.isnan(tmpl).any(axis=1) | np.isnan(search).any(axis=1)
    tmpl = np.where(bad[:, None], 0.0, tmpl)
    search = np.where(bad[:, None], 0.0, search)

    t0 = tmpl - tmpl.mean(axis=1, keepdims=True)
    t_norm = np.sqrt(np.sum(t0 ** 2, axis=1))
    # per-lag sums of the upstream excerpt, for its local mean and energy
    cs = np.concatenate((np.zeros((n_cols, 1)), np.cumsum(search, axis=1)), axis=1)
    cs2 = np.concatenate((np.zeros((n_cols, 1)), np.cumsum(search ** 2, axis=1)), axis=1)
    s1 = cs[:, w:] - cs[:, :-w]
    s2 = cs2[:, w:] - cs2[:, :-w]
    s_energy = np.maximum(s2 - s1 ** 2 / w, 0.0)

    nfft = sp_fft.next_fast_len(w + 2 * lag)
    cross = np.conj(sp_fft.rfft(t0, nfft, axis=1)) * sp_fft.rfft(search, nfft, axis=1)
    num = sp_fft.irfft(cross, nfft, axis=1)[:, : 2 * lag + 1]

    denom = t_norm[:, None] * np.sqrt(s_energy)
    # relative floor: cumulative-sum cancellation leaves tiny positive residue on flat data
    tiny = 1e-12 * (t_norm[:, None] * np.sqrt(s2) + 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(denom > tiny, num / denom, 0.0)
    vals = np.clip(vals, -1.0, 1.0)
    flat = (t_norm == 0) | np.all(denom <= tiny, axis=1)
    flagged = bad | flat
    vals[flagged] = 0.0
    times = start + (offsets + w // 2).astype(np.int64) * up.step_us
    return CorrelationMap(times, lags_s, vals, flagged)


def detect_baseline_lag(cmap: CorrelationMap) -> float:
    """Lag of the stationary direct-arrival ridge (median over unflagged columns)."""
    good = cmap.values[~cmap.flagged]
    if good.shape[0] == 0:
        return math.nan
    return float(cmap.lags_s[int(np.argmax(np.median(good, axis=0)))])


def lag_to_position(lag_s: float, baseline_lag_s: float, cfg: TrackerConfig = TrackerConfig(),
                    length_m: float | None = None) -> float:
    """Reflector distance from the upstream station: c * (lag - tau0) / 2, clamped."""
    x = cfg.sound_speed_m_s * (lag_s - baseline_lag_s) / 2.0
    hi = math.inf if length_m is None else length_m
    return min(max(x, 0.0), hi)


def position_to_lag(x_m: float, baseline_lag_s: float, cfg: TrackerConfig = TrackerConfig()) -> float:
    return baseline_lag_s + 2.0 * x_m / cfg.sound_speed_m_s


@dataclass(frozen=True)
class Trajectory:
    times_us: np.ndarray
    lags_s: np.ndarray
    scores: np.ndarray
    positions_m: np.ndarray
    velocity_m_s: float
    baseline_lag_s: float
    departure_us: int | None
    eta_us: int | None

    @property
    def mean_score(self) -> float:
        return float(self.scores.mean())

    @property
    def start_lag_s(self) -> float:
        """The track leaves the direct-arrival ridge, which is masked near the PIG's origin."""
        return self.baseline_lag_s

    @property
    def end_lag_s(self) -> float:
        return float(self.lags_s[-1])

    def __len__(self) -> int:
        return int(self.times_us.size)


def _best_path(gain: np.ndarray, max_step: int) -> tuple[list[tuple[int, int]], float]:
    # Best-scoring monotone path of any start/end column; a path may only
    # grow its lag index by 0..max_step bins per column.
    n_cols, n_lags = gain.shape
    best = np.full((n_cols, n_lags), -np.inf)
    back = np.full((n_cols, n_lags), -1, dtype=np.int64)
    best[0] = gain[0]
    for c in range(1, n_cols):
        prev = best[c - 1]
        cand = prev.copy()
        arg = np.arange(n_lags)
        for d in range(1, max_step + 1):
            shifted = np.full(n_lags, -np.inf)
            shifted[d:] = prev[:-d]
            better = shifted > cand
            cand = np.where(better, shifted, cand)
            arg = np.where(better, np.arange(n_lags) - d, arg)
        extend = cand > 0
        best[c] = gain[c] + np.where(extend, cand, 0.0)
        back[c] = np.where(extend, arg, -1)
    flat = int(np.argmax(best))
    c, j = divmod(flat, n_lags)
    total = float(best[c, j])
    path = [(c, j)]
    while back[c, j] >= 0:
        j = int(back[c, j])
        c -= 1
        path.append((c, j))
    path.reverse()
    return path, total


def extract_trajectory(cmap: CorrelationMap, cfg: TrackerConfig, seg: SegmentMeta,
                       baseline_lag_s: float | None = None) -> Trajectory | None:
    """Chain ridge peaks off the direct-arrival ridge into a monotone PIG track.

    Candidate lags lie between the masked baseline band and the far end of
    the segment. The chosen path maximises the summed score in excess of
    ``score_offset``, may not decrease in lag and may rise by at most
    ``2 * v_max / c * hop`` per column (at least one lag bin). Returns None
    when the path's mean score is below ``min_mean_score`` or it is shorter
    than ``min_track_s``.
    """
    if len(cmap) == 0:
        raise ValueError("empty correlation map")
    tau0 = detect_baseline_lag(cmap) if baseline_lag_s is None else baseline_lag_s
    if math.isnan(tau0):
        return None
    length_m = seg.length_km * 1000.0
    lag_step = cmap.lag_step_s
    far = position_to_lag(length_m, tau0, cfg) + 2 * lag_step
    allowed = (cmap.lags_s > tau0 + cfg.baseline_exclusion_s) & (cmap.lags_s <= far)
    if not allowed.any():
        return None
    cols = np.flatnonzero(allowed)
    lo = int(cols[0])
    score = np.clip(cmap.values[:, allowed], 0.0, 1.0)
    hop_s = (cmap.times_us[1] - cmap.times_us[0]) / 1e6 if len(cmap) > 1 else cfg.hop_s
    max_step = max(1, math.ceil(2 * cfg.v_max_m_s / cfg.sound_speed_m_s * hop_s / lag_step - 1e-9))
    path, _ = _best_path(score - cfg.score_offset, max_step)

    ci = np.array([p[0] for p in path])
    li = np.array([p[1] for p in path])
    scores = score[ci, li]
    if scores.mean() < cfg.min_mean_score or len(path) * hop_s < cfg.min_track_s:
        return None
    times = cmap.times_us[ci]
    lags = cmap.lags_s[li + lo]
    assert np.all(np.diff(lags) >= 0), "trajectory lags must be non-decreasing"
    positions = np.array([lag_to_position(l, tau0, cfg, length_m) for l in lags])

    t_rel = (times - times[0]) / 1e6
    slope, intercept = np.polyfit(t_rel, lags, 1) if len(path) > 1 else (0.0, lags[0])
    velocity = cfg.sound_speed_m_s * slope / 2.0
    departure = eta = None
    if slope > 0:
        departure = int(times[0] + round((tau0 - intercept) / slope * 1e6))
        eta = int(times[0] + round((position_to_lag(length_m, tau0, cfg) - intercept) / slope * 1e6))
    return Trajectory(times, lags, scores, positions, float(velocity), tau0, departure, eta)


def track(up: UniformSeries, down: UniformSeries, seg: SegmentMeta,
          cfg: TrackerConfig = TrackerConfig()) -> tuple[CorrelationMap, Trajectory | None]:
    cmap = build_correlation_map(up, down, cfg)
    if len(cmap) == 0:
        return cmap, None
    return cmap, extract_trajectory(cmap, cfg, seg)


def write_map_csv(path, cmap: CorrelationMap) -> None:
    lines = ["time_us," + ",".join(fmt(l) for l in cmap.lags_s)]
    for t, row in zip(cmap.times_us, cmap.values):
        lines.append(f"{int(t)}," + ",".join(fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_trajectory_csv(path, traj: Trajectory | None) -> None:
    lines = ["time_us,lag_s,position_m,score"]
    if traj is not None:
        lines += [f"{int(t)},{fmt(l)},{fmt(x)},{fmt(s)}" for t, l, x, s in
                  zip(traj.times_us, traj.lags_s, traj.positions_m, traj.scores)]
    atomic_write_text(path, "\n".join(lines) + "\n")
