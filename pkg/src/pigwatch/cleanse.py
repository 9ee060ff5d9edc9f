"""Outlier removal and operating-regime detection with a diagonal Gaussian mixture."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .series import (ChannelKind, PressureSeries, SeriesError, UniformSeries,
                     atomic_write_text)

VARIANCE_FLOOR = 1e-6
MAX_ITER = 200
REL_TOL = 1e-6
# distinctness guards for the regime labels (see component_labels)
MIN_OFF_DROP = 0.10
MIN_REGULATION_STD_RATIO = 2.0


class CleanseError(ValueError):
    pass


@dataclass(frozen=True)
class OutlierPolicy:
    static_min_bar: float = 0.5
    static_max_bar: float = 80.0
    dynamic_min_kpa: float = -200.0
    dynamic_max_kpa: float = 200.0

    def __post_init__(self):
        if not (self.static_min_bar < self.static_max_bar
                and self.dynamic_min_kpa < self.dynamic_max_kpa):
            raise CleanseError("outlier bounds need min < max")

    def bounds(self, channel: ChannelKind) -> tuple[float, float]:
        if channel is ChannelKind.STATIC_BAR:
            return self.static_min_bar, self.static_max_bar
        return self.dynamic_min_kpa, self.dynamic_max_kpa


def remove_outliers(s: PressureSeries, policy: OutlierPolicy = OutlierPolicy()
                    ) -> tuple[PressureSeries, int]:
    """Drop samples outside the channel's bounds; returns (series, removed_count).

    Readings below the minimum or above the maximum are discarded, the bound
    values themselves are kept.
    """
    lo, hi = policy.bounds(s.channel)
    keep = (s.values >= lo) & (s.values <= hi)
    removed = int(keep.size - np.count_nonzero(keep))
    if removed == 0:
        return s, 0
    return s.with_samples(s.t_us[keep], s.values[keep]), removed


class StateLabel(enum.Enum):
    OFF = "OFF"
    REGULATION = "REGULATION"
    TRANSPORT = "TRANSPORT"


@dataclass(frozen=True)
class StateFeatureRow:
    window_start: int
    mean_bar: float
    std_bar: float


def state_features(u: UniformSeries, window_s: float = 600.0) -> list[StateFeatureRow]:
    """Mean and population std of static pressure per non-overlapping window.

    Windows start at the series origin; any window containing a MISSING bin,
    and a trailing partial window, emit no row.
    """
    if window_s < u.step_s:
        raise CleanseError("window_s must be at least one grid step")
    per = int(round(window_s / u.step_s))
    n_win = len(u) // per
    if n_win == 0:
        return []
    block = u.values[: n_win * per].reshape(n_win, per)
    ok = ~np.isnan(block).any(axis=1)
    means = block[ok].mean(axis=1)
    stds = block[ok].std(axis=1)
    starts = u.start_us + np.flatnonzero(ok).astype(np.int64) * per * u.step_us
    return [StateFeatureRow(int(t), float(m), float(s))
            for t, m, s in zip(starts, means, stds)]


def _rows_matrix(rows: Sequence[StateFeatureRow]) -> np.ndarray:
    return np.array([[r.mean_bar, r.std_bar] for r in rows], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance mixture fitted on standardized (mean, std) features.

    ``means`` and ``variances`` live in standardized units; ``center`` and
    ``scale`` map them back to bar via :attr:`raw_means` / :attr:`raw_variances`.
    """

    k: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    converged: bool
    log_likelihood: float
    ll_history: tuple[float, ...] = field(default=(), repr=False)
    init: str = "quantile"

    @property
    def raw_means(self) -> np.ndarray:
        return self.means * self.scale + self.center

    @property
    def raw_variances(self) -> np.ndarray:
        return self.variances * self.scale ** 2

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / self.scale

    def responsibilities(self, x_raw: np.ndarray) -> np.ndarray:
        log_r, _ = _e_step(self.standardize(x_raw), self.weights, self.means, self.variances)
        return np.exp(log_r)


def _log_gauss(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (n, k) log densities of diagonal Gaussians
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * (np.sum(diff ** 2 / variances[None], axis=2)
                   + np.sum(np.log(2 * np.pi * variances), axis=1)[None, :])


def _e_step(x, weights, means, variances):
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    joint = _log_gauss(x, means, variances) + log_w[None, :]
    top = joint.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(joint - top).sum(axis=1))
    return joint - log_norm[:, None], float(log_norm.sum())


def _m_step(x, log_r):
    r = np.exp(log_r)
    nk = r.sum(axis=0)
    nk_safe = np.maximum(nk, np.finfo(float).tiny)
    weights = nk / nk.sum()
    means = (r.T @ x) / nk_safe[:, None]
    variances = (r.T @ x ** 2) / nk_safe[:, None] - means ** 2
    # a component that lost all mass keeps a finite, floored spread
    variances = np.where(nk[:, None] > 0, variances, 1.0)
    return weights, means, np.maximum(variances, VARIANCE_FLOOR)


def _quantile_seeds(x: np.ndarray, raw: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(raw[:, 0], kind="stable")
    n = len(order)
    picks = [order[min(n - 1, int((2 * i + 1) * n // (2 * k)))] for i in range(k)]
    return x[picks].copy()


def _farthest_seeds(x: np.ndarray, raw: np.ndarray, k: int) -> np.ndarray:
    first = int(np.argmin(raw[:, 0]))
    picks = [first]
    dist = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        picks.append(nxt)
        dist = np.minimum(dist, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[picks].copy()


def _run_em(x: np.ndarray, seeds: np.ndarray):
    k = seeds.shape[0]
    weights = np.full(k, 1.0 / k)
    means = seeds
    variances = np.ones_like(seeds)
    history: list[float] = []
    converged = False
    for _ in range(MAX_ITER):
        log_r, ll = _e_step(x, weights, means, variances)
        if history:
            prev = history[-1]
            # EM is monotone; anything beyond rounding noise is a bug
            assert ll >= prev - 1e-9 * max(1.0, abs(prev)), "EM log-likelihood decreased"
            history.append(ll)
            if abs(ll - prev) <= REL_TOL * max(abs(prev), 1e-300):
                converged = True
                break
        else:
            history.append(ll)
        weights, means, variances = _m_step(x, log_r)
    if not converged:
        # account for the final M-step so the stored parameters match the likelihood
        _, ll = _e_step(x, weights, means, variances)
        history.append(ll)
    return weights, means, variances, converged, history


def fit_gmm(rows: Sequence[StateFeatureRow] | np.ndarray, k: int = 3) -> GmmModel:
    """Fit a k-component diagonal GMM by EM on standardized features.

    Two deterministic seedings are tried: component means at the
    (2i+1)/(2k) quantile rows by windowed mean, and farthest-point seeding
    starting from the lowest-mean row. The fit with the higher final
    log-likelihood wins (quantile seeding on ties). No RNG is involved.
    """
    raw = rows if isinstance(rows, np.ndarray) else _rows_matrix(rows)
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise CleanseError("k must be >= 1")
    if raw.shape[0] < 10 * k:
        raise CleanseError(f"need at least {10 * k} feature rows for k={k}, got {raw.shape[0]}")
    if np.all(raw == raw[0]):
        raise CleanseError("degenerate features: all rows identical")
    center = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    x = (raw - center) / scale

    best = None
    for name, seeder in (("quantile", _quantile_seeds), ("farthest", _farthest_seeds)):
        if k == 1 and best is not None:
            break
        fit = _run_em(x, seeder(x, raw, k))
        if best is None or fit[4][-1] > best[1][4][-1]:
            best = (name, fit)
    name, (weights, means, variances, converged, history) = best
    return GmmModel(k=k, weights=weights, means=means, variances=variances,
                    center=center, scale=scale, converged=converged,
                    log_likelihood=history[-1], ll_history=tuple(history), init=name)


@dataclass(frozen=True)
class StateSegmentation:
    window_s: float
    window_starts: np.ndarray
    labels: tuple[StateLabel, ...]

    def __post_init__(self):
        starts = np.asarray(self.window_starts, dtype=np.int64)
        if starts.size != len(self.labels):
            raise CleanseError("one label per window required")
        if starts.size > 1 and np.any(np.diff(starts) <= 0):
            raise CleanseError("window starts must be strictly increasing")
        object.__setattr__(self, "window_starts", starts)

    def __len__(self) -> int:
        return len(self.labels)


def component_labels(model: GmmModel, min_off_drop: float = MIN_OFF_DROP,
                     min_regulation_ratio: float = MIN_REGULATION_STD_RATIO) -> list[StateLabel]:
    """Map components to regimes: lowest mean is Off, the noisier of the rest Regulation.

    A fixed k=3 fit also splits a single-regime trace three ways, so a
    candidate keeps its label only if it is physically distinct from the
    Transport component: Off must sit at least ``min_off_drop`` (fraction)
    below it in mean pressure, Regulation must exceed its windowed std by
    ``min_regulation_ratio``. Candidates that fail are labelled Transport.
    """
    if model.k != 3:
        raise CleanseError(f"regime labelling needs k=3, model has k={model.k}")
    m = model.raw_means
    off = int(np.argmin(m[:, 0]))
    rest = [i for i in range(3) if i != off]
    reg = rest[0] if m[rest[0], 1] > m[rest[1], 1] else rest[1]
    tr = rest[1] if reg == rest[0] else rest[0]
    labels = [StateLabel.TRANSPORT] * 3
    if m[off, 0] <= (1.0 - min_off_drop) * m[tr, 0]:
        labels[off] = StateLabel.OFF
    if m[reg, 1] >= min_regulation_ratio * m[tr, 1]:
        labels[reg] = StateLabel.REGULATION
    return labels


def classify_states(model: GmmModel, rows: Sequence[StateFeatureRow],
                    window_s: float = 600.0) -> StateSegmentation:
    comp = component_labels(model)
    if not rows:
        return StateSegmentation(window_s, np.empty(0, dtype=np.int64), ())
    resp = model.responsibilities(_rows_matrix(rows))
    winners = np.argmax(resp, axis=1)
    return StateSegmentation(window_s, np.array([r.window_start for r in rows], dtype=np.int64),
                             tuple(comp[i] for i in winners))


def detect_states(u: UniformSeries, window_s: float = 600.0) -> tuple[StateSegmentation, GmmModel]:
    """Feature extraction, k=3 fit and classification in one call."""
    rows = state_features(u, window_s)
    model = fit_gmm(rows, 3)
    return classify_states(model, rows, window_s), model


def keep_mask(u: UniformSeries, seg: StateSegmentation,
              keep: StateLabel = StateLabel.TRANSPORT) -> np.ndarray:
    """Boolean per bin: True where the bin lies in a window labelled ``keep``.

    Bins not covered by any classified window count as not kept.
    """
    mask = np.zeros(len(u), dtype=bool)
    if len(seg) == 0 or len(u) == 0:
        return mask
    win_us = int(round(seg.window_s * 1e6))
    t = u.times_us
    pos = np.searchsorted(seg.window_starts, t, side="right") - 1
    valid = pos >= 0
    inside = np.zeros_like(valid)
    inside[valid] = t[valid] < seg.window_starts[pos[valid]] + win_us
    is_keep = np.array([lab is keep for lab in seg.labels], dtype=bool)
    mask[inside] = is_keep[pos[inside]]
    return mask


def mask_series(u: UniformSeries, seg: StateSegmentation,
                keep: StateLabel = StateLabel.TRANSPORT) -> UniformSeries:
    """Set bins outside ``keep`` windows to MISSING; retained values are untouched."""
    vals = u.values.copy()
    vals[~keep_mask(u, seg, keep)] = np.nan
    return u.replace_values(vals)


def mask_pair(up: UniformSeries, seg_up: StateSegmentation, down: UniformSeries,
              seg_down: StateSegmentation, keep: StateLabel = StateLabel.TRANSPORT
              ) -> tuple[UniformSeries, UniformSeries]:
    """Mask both stations with the intersection of their ``keep`` masks."""
    if not up.same_grid(down):
        raise SeriesError("station series must share a grid for joint masking")
    joint = keep_mask(up, seg_up, keep) & keep_mask(down, seg_down, keep)
    a, b = up.values.copy(), down.values.copy()
    a[~joint] = np.nan
    b[~joint] = np.nan
    return up.replace_values(a), down.replace_values(b)


def write_segmentation_csv(path, seg: StateSegmentation) -> None:
    lines = ["window_start_us,label"]
    lines += [f"{int(t)},{lab.value}" for t, lab in zip(seg.window_starts, seg.labels)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_segmentation_csv(path, window_s: float = 600.0) -> StateSegmentation:
    starts, labels = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "window_start_us,label":
            raise CleanseError(f"{path}: unexpected header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            t, lab = line.split(",")
            try:
                labels.append(StateLabel(lab))
            except ValueError:
                raise CleanseError(f"{path}: line {line_no}: unknown label {lab!r}") from None
            starts.append(int(t))
    return StateSegmentation(window_s, np.array(starts, dtype=np.int64), tuple(labels))


def label_agreement(a: StateSegmentation, b: StateSegmentation) -> float:
    """Fraction of windows (matched by start time) carrying the same label."""
    common, ia, ib = np.intersect1d(a.window_starts, b.window_starts, return_indices=True)
    if common.size == 0:
        return math.nan
    same = sum(a.labels[i] is b.labels[j] for i, j in zip(ia, ib))
    return same / common.size
