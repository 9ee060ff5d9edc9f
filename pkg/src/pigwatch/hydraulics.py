"""Altitude compensation and normalized head loss between station pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .series import (SegmentMeta, SeriesError, StationMeta, UniformSeries,
                     atomic_write_text, fmt, read_grid_csv)

PA_PER_BAR = 1e5
WEEK_S = 7 * 86400.0


@dataclass(frozen=True)
class FluidProps:
    density_kg_m3: float = 900.0
    gravity_m_s2: float = 9.81

    def __post_init__(self):
        if not 700.0 <= self.density_kg_m3 <= 1100.0:
            raise ValueError(f"density {self.density_kg_m3} kg/m3 outside [700, 1100]")
        if not self.gravity_m_s2 > 0:
            raise ValueError("gravity must be positive")


def hydrostatic_dp(fluid: FluidProps, dz_m: float) -> float:
    """Pressure differential in Pa for a rise of ``dz_m`` metres: -rho * g * dz."""
    return -fluid.density_kg_m3 * fluid.gravity_m_s2 * dz_m


@dataclass(frozen=True)
class CompensationEntry:
    station: str
    dz_m: float
    dp_pa: float

    @property
    def dp_bar(self) -> float:
        return self.dp_pa / PA_PER_BAR


def compensation_table(stations: Sequence[StationMeta], fluid: FluidProps = FluidProps(),
                       reference: str | None = None) -> list[CompensationEntry]:
    """dz and dP of every station relative to the reference (default: chainage 0)."""
    if reference is None:
        ref = next(s for s in stations if s.chainage_km == 0)
    else:
        ref = next(s for s in stations if s.id == reference)
    return [CompensationEntry(s.id, s.altitude_m - ref.altitude_m,
                              hydrostatic_dp(fluid, s.altitude_m - ref.altitude_m))
            for s in stations]


def compensate(u: UniformSeries, dp_pa: float) -> UniformSeries:
    """P' = P - dP, with P and P' in bar and dP in Pa. MISSING stays MISSING."""
    return u.replace_values(u.values - dp_pa / PA_PER_BAR)


def head_loss(up: UniformSeries, down: UniformSeries, seg: SegmentMeta) -> UniformSeries:
    """(up - down) / length in bar/km; MISSING where either side is MISSING."""
    if not up.same_grid(down):
        raise SeriesError(f"segment {seg.name}: upstream and downstream grids differ")
    return up.replace_values((up.values - down.values) / seg.length_km)


def moving_average(u: UniformSeries, window_s: float = WEEK_S,
                   min_coverage: float = 0.10) -> UniformSeries:
    """Trailing mean over the last ``window_s`` seconds of present bins.

    Bins before the series start count as absent. The output is MISSING when
    fewer than ``min_coverage`` of the window's bins hold data.
    """
    if window_s < u.step_s:
        raise ValueError("window_s must be at least one grid step")
    n = int(round(window_s / u.step_s))
    present = ~np.isnan(u.values)
    csum = np.concatenate(([0.0], np.cumsum(np.where(present, u.values, 0.0))))
    ccount = np.concatenate(([0], np.cumsum(present)))
    hi = np.arange(1, len(u) + 1)
    lo = np.maximum(hi - n, 0)
    total = csum[hi] - csum[lo]
    count = ccount[hi] - ccount[lo]
    out = np.full(len(u), np.nan)
    ok = count >= min_coverage * n
    out[ok] = total[ok] / count[ok]
    # cumulative-sum rounding must not push the mean outside the window's range
    if ok.any():
        out[ok] = _clip_to_window(u.values, out, ok, n)
    return u.replace_values(out)


def _clip_to_window(values, out, ok, n):
    res = out[ok]
    idx = np.flatnonzero(ok)
    vals = np.where(np.isnan(values), np.inf, values)
    mins = _trailing_extreme(vals, n, np.minimum)
    vals = np.where(np.isnan(values), -np.inf, values)
    maxs = _trailing_extreme(vals, n, np.maximum)
    return np.clip(res, mins[idx], maxs[idx])


def _trailing_extreme(vals: np.ndarray, n: int, op) -> np.ndarray:
    # van Herk / Gil-Werman running extreme over trailing windows of n bins
    m = vals.size
    if m == 0:
        return vals
    pad = (-m) % n
    fill = np.inf if op is np.minimum else -np.inf
    x = np.concatenate((np.full(n - 1, fill), vals, np.full(pad, fill)))
    blocks = (x.size + n - 1) // n
    x = np.concatenate((x, np.full(blocks * n - x.size, fill))).reshape(blocks, n)
    prefix = op.accumulate(x, axis=1).ravel()
    suffix = op.accumulate(x[:, ::-1], axis=1)[:, ::-1].ravel()
    # window ending at padded index j (inclusive) starts at j - n + 1
    j = np.arange(n - 1, n - 1 + m)
    return op(suffix[j - n + 1], prefix[j])


@dataclass(frozen=True)
class HeadLossSeries:
    segment: SegmentMeta
    short_term: UniformSeries
    long_term: UniformSeries


def head_loss_series(up: UniformSeries, down: UniformSeries, seg: SegmentMeta,
                     window_s: float = WEEK_S) -> HeadLossSeries:
    short = head_loss(up, down, seg)
    return HeadLossSeries(seg, short, moving_average(short, window_s))


def write_head_loss_csv(path, hl: HeadLossSeries) -> None:
    lines = [HEAD_LOSS_HEADER]
    lines += [f"{int(t)},{fmt(s)},{fmt(l)}" for t, s, l in
              zip(hl.short_term.times_us, hl.short_term.values, hl.long_term.values)]
    atomic_write_text(path, "\n".join(lines) + "\n")


HEAD_LOSS_HEADER = "bin_start_us,short_term_bar_per_km,long_term_bar_per_km"


def read_head_loss_csv(path, seg: SegmentMeta) -> HeadLossSeries:
    start, step, cols = read_grid_csv(path, HEAD_LOSS_HEADER)
    return HeadLossSeries(seg, UniformSeries(start, step, cols[:, 0]),
                          UniformSeries(start, step, cols[:, 1]))


def density_error_bound(assumed: FluidProps, rho_true: float, dz_m: float) -> float:
    """Worst-case error in bar on dP when the true density differs from the assumed one."""
    return abs(rho_true - assumed.density_kg_m3) * assumed.gravity_m_s2 * abs(dz_m) / PA_PER_BAR
