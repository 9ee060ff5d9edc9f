"""Seeded ground-truth scenarios: regime-switching static pressure with a fouling
sawtooth, and hydrophone pairs carrying a direct pump path plus a PIG echo."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .cleanse import StateLabel, StateSegmentation, write_segmentation_csv
from .hydraulics import PA_PER_BAR, FluidProps, compensation_table
from .series import (US_PER_S, ChannelKind, PressureSeries, SegmentMeta, StationMeta,
                     UniformSeries, all_segments, atomic_write_text, fmt, to_us,
                     validate_stations,
                     write_csv_series)

DAY_S = 86400.0
RNG_ALGORITHM = "numpy.random.PCG64"

DEFAULT_STATIONS = (
    StationMeta("A", 0.0, 179.0),
    StationMeta("B", 59.307, 359.0),
    StationMeta("C", 100.486, 558.0),
)


@dataclass(frozen=True)
class PigEvent:
    time_us: int
    removal_fraction: float = 1.0
    velocity_m_s: float = 1.163

    def __post_init__(self):
        if not 0.0 <= self.removal_fraction <= 1.0:
            raise ValueError("removal_fraction must lie in [0, 1]")
        if not self.velocity_m_s > 0:
            raise ValueError("velocity must be positive")


def _default_events() -> tuple[PigEvent, ...]:
    t0 = to_us("2013-06-01T08:00:00")
    return tuple(PigEvent(t0 + int(d * DAY_S) * US_PER_S) for d in (80, 200, 320, 440))


@dataclass(frozen=True)
class ScenarioConfig:
    stations: tuple[StationMeta, ...] = DEFAULT_STATIONS
    density: float = 900.0
    gravity: float = 9.81
    delivery_pressure_bar: float = 36.0
    start_us: int = field(default_factory=lambda: to_us("2013-06-01T00:00:00"))
    span_days: float = 540.0
    static_step_s: float = 60.0
    # hydraulic state
    baseline_head_loss_bar_per_km: float = 0.04
    fouling_rate_bar_per_km_per_day: float = 0.0004
    initial_fouling_days: float = 40.0
    pig_events: tuple[PigEvent, ...] = field(default_factory=_default_events)
    # operating regimes (Markov chain on a fixed window grid)
    regime_window_s: float = 600.0
    transport_dwell_s: float = 2 * DAY_S
    regulation_dwell_s: float = 2 * 3600.0
    off_dwell_s: float = 8 * 3600.0
    regulation_drop_bar: float = 6.0
    # common-mode process variability per regime (std, uniformly distributed)
    transport_ripple_bar: float = 0.3
    regulation_fluctuation_bar: float = 2.5
    off_ripple_bar: float = 0.05
    off_residual_bar: float = 1.5
    # sensor noise on the 60 s means (a 0.1 bar transducer averaged over 1200 samples) and outliers
    static_noise_bar: float = 0.003
    dynamic_noise_kpa: float = 0.5
    outliers_per_station: int = 10
    # acoustics
    dynamic_rate_hz: float = 2.0
    sound_speed_m_s: float = 1186.14
    source_std_kpa: float = 5.0
    source_band_hz: tuple[float, float] = (0.02, 0.8)
    downstream_gain: float = 0.6
    echo_gain: float = 0.7
    acoustic_margin_s: float = 3600.0
    seed: int = 20130601

    def __post_init__(self):
        validate_stations(self.stations)
        ch = [s.chainage_km for s in self.stations]
        if ch != sorted(ch):
            raise ValueError("stations must be ordered by chainage")
        if self.fouling_rate_bar_per_km_per_day < 0 or self.baseline_head_loss_bar_per_km < 0:
            raise ValueError("head-loss rates must be non-negative")
        if min(self.static_noise_bar, self.dynamic_noise_kpa, self.regulation_fluctuation_bar,
               self.transport_ripple_bar, self.off_ripple_bar) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.span_days <= 0 or self.static_step_s <= 0 or self.dynamic_rate_hz <= 0:
            raise ValueError("span, step and rates must be positive")
        if self.regime_window_s % self.static_step_s:
            raise ValueError("regime window must be a multiple of the static step")
        FluidProps(self.density, self.gravity)

    @property
    def fluid(self) -> FluidProps:
        return FluidProps(self.density, self.gravity)

    @property
    def end_us(self) -> int:
        return self.start_us + int(round(self.span_days * DAY_S)) * US_PER_S

    def station(self, sid: str) -> StationMeta:
        for s in self.stations:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_meta(self) -> dict[str, str]:
        meta = {"rng_algorithm": RNG_ALGORITHM}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name == "stations":
                val = ";".join(f"{s.id}:{s.chainage_km!r}:{s.altitude_m!r}" for s in val)
            elif f.name == "pig_events":
                val = ";".join(f"{e.time_us}:{e.removal_fraction!r}:{e.velocity_m_s!r}" for e in val)
            elif isinstance(val, tuple):
                val = ":".join(repr(v) for v in val)
            else:
                val = repr(val)
            meta[f.name] = val
        return meta


def zero_noise(cfg: ScenarioConfig) -> ScenarioConfig:
    """Same scenario without sensor noise or injected outliers."""
    return cfg.replace(static_noise_bar=0.0, dynamic_noise_kpa=0.0, outliers_per_station=0)


@dataclass(frozen=True)
class StaticTruth:
    labels: StateSegmentation
    head_loss: UniformSeries            # bar/km, identical per km on every segment
    outlier_times_us: dict[str, np.ndarray]
    pig_events: tuple[PigEvent, ...]


def fouling_head_loss(cfg: ScenarioConfig, times_us: np.ndarray) -> np.ndarray:
    """Noise-free per-km head loss: baseline plus linear fouling reset at pig events.

    Each event multiplies the accumulated fouling by ``1 - removal_fraction``.
    """
    rate = cfg.fouling_rate_bar_per_km_per_day / DAY_S
    t = (np.asarray(times_us, dtype=np.int64) - cfg.start_us) / US_PER_S
    carry = cfg.initial_fouling_days * DAY_S * rate
    last = 0.0
    seg_start = np.zeros(t.shape)
    seg_carry = np.full(t.shape, carry)
    for ev in sorted(cfg.pig_events, key=lambda e: e.time_us):
        te = (ev.time_us - cfg.start_us) / US_PER_S
        carry = (carry + rate * (te - last)) * (1.0 - ev.removal_fraction)
        last = te
        after = t >= te
        seg_start[after] = te
        seg_carry[after] = carry
    return cfg.baseline_head_loss_bar_per_km + seg_carry + rate * (t - seg_start)


def _regime_chain(cfg: ScenarioConfig, n_windows: int, rng: np.random.Generator) -> np.ndarray:
    # 0 = off, 1 = regulation, 2 = transport
    dwell = {0: cfg.off_dwell_s, 1: cfg.regulation_dwell_s, 2: cfg.transport_dwell_s}
    nxt = {2: ([1, 0], [0.7, 0.3]), 1: ([2, 0], [0.8, 0.2]), 0: ([1, 2], [0.5, 0.5])}
    out = np.empty(n_windows, dtype=np.int8)
    state, i = 2, 0
    while i < n_windows:
        length = max(1, int(round(rng.exponential(dwell[state]) / cfg.regime_window_s)))
        out[i:i + length] = state
        i += length
        choices, probs = nxt[state]
        state = int(rng.choice(choices, p=probs))
    return out


_LABELS = (StateLabel.OFF, StateLabel.REGULATION, StateLabel.TRANSPORT)


def generate_static_scenario(cfg: ScenarioConfig = ScenarioConfig()
                             ) -> tuple[dict[str, PressureSeries], StaticTruth]:
    """Static pressure (bar, one sample per grid step) at every station plus ground truth.

    The last station is held at the delivery pressure; upstream stations are
    back-computed from the true head loss and their altitude offsets.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0])))
    step_us = int(round(cfg.static_step_s * US_PER_S))
    n = int((cfg.end_us - cfg.start_us) // step_us)
    t = cfg.start_us + np.arange(n, dtype=np.int64) * step_us
    per_win = int(round(cfg.regime_window_s / cfg.static_step_s))
    n_win = -(-n // per_win)
    regimes = _regime_chain(cfg, n_win, rng)
    regime = np.repeat(regimes, per_win)[:n]

    h = fouling_head_loss(cfg, t)
    comp = {e.station: e.dp_pa / PA_PER_BAR for e in compensation_table(cfg.stations, cfg.fluid)}
    anchor = cfg.stations[-1]
    top_alt = max(s.altitude_m for s in cfg.stations)
    comp_anchor = cfg.delivery_pressure_bar - comp[anchor.id]
    # pump-side variability reaches every station alike, so it leaves head loss untouched
    ripple_std = np.array([cfg.off_ripple_bar, cfg.regulation_fluctuation_bar,
                           cfg.transport_ripple_bar])[regime]
    ripple = ripple_std * rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), n)

    series: dict[str, PressureSeries] = {}
    outliers: dict[str, np.ndarray] = {}
    for st in cfg.stations:
        p = comp_anchor + h * (anchor.chainage_km - st.chainage_km) + comp[st.id]
        p[regime == 1] -= cfg.regulation_drop_bar
        off = regime == 0
        p[off] = (cfg.off_residual_bar
                  + cfg.density * cfg.gravity * (top_alt - st.altitude_m) / PA_PER_BAR)
        p = p + ripple
        if cfg.static_noise_bar > 0:
            p = p + cfg.static_noise_bar * rng.standard_normal(n)
        idx = np.sort(rng.choice(n, size=min(cfg.outliers_per_station, n), replace=False))
        if idx.size:
            low = rng.random(idx.size) < 0.5
            p[idx] = np.where(low, rng.uniform(0.0, 0.4, idx.size), rng.uniform(81.0, 120.0, idx.size))
        outliers[st.id] = t[idx]
        series[st.id] = PressureSeries(st.id, ChannelKind.STATIC_BAR, t, p, 1.0 / cfg.static_step_s)

    win_starts = cfg.start_us + np.arange(n_win, dtype=np.int64) * per_win * step_us
    full = n // per_win
    labels = StateSegmentation(cfg.regime_window_s, win_starts[:full],
                               tuple(_LABELS[r] for r in regimes[:full]))
    truth = StaticTruth(labels, UniformSeries(cfg.start_us, cfg.static_step_s, h), outliers,
                        tuple(sorted(cfg.pig_events, key=lambda e: e.time_us)))
    return series, truth


@dataclass(frozen=True)
class AcousticTruth:
    segment: SegmentMeta
    direct_delay_s: float
    times_us: np.ndarray
    positions_m: np.ndarray          # NaN while the PIG is outside the segment
    velocity_m_s: float | None
    entry_us: int | None
    exit_us: int | None


def _bandlimited_source(cfg: ScenarioConfig, n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    lo, hi = cfg.source_band_hz
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    src = signal.sosfiltfilt(sos, white)
    return src * (cfg.source_std_kpa / src.std())


def generate_acoustic_scenario(cfg: ScenarioConfig, segment: SegmentMeta,
                               pig_event: PigEvent | None = None, *,
                               start_us: int | None = None, duration_s: float | None = None,
                               echo_gain: float | None = None
                               ) -> tuple[PressureSeries, PressureSeries, AcousticTruth]:
    """Dynamic pressure (kPa) at both ends of ``segment`` around a PIG passage.

    The upstream pump emits band-limited noise ``s``. Downstream records
    ``g_d * s(t - D/c)``; upstream records ``s(t) + g_e * s(t - 2x(t)/c)``
    while the PIG is inside the segment at distance ``x(t)``. Without a PIG
    the span defaults to two hours from ``start_us`` (or the scenario start).
    """
    up_st = cfg.station(segment.upstream)
    down_st = cfg.station(segment.downstream)
    if down_st.chainage_km <= up_st.chainage_km:
        raise ValueError(f"segment {segment.name} is not ordered downstream")
    gain = cfg.echo_gain if echo_gain is None else echo_gain
    c = cfg.sound_speed_m_s
    length_m = (down_st.chainage_km - up_st.chainage_km) * 1000.0
    entry = exit_ = None
    if pig_event is not None:
        v = pig_event.velocity_m_s
        entry = pig_event.time_us + int(round(up_st.chainage_km * 1000.0 / v * US_PER_S))
        exit_ = pig_event.time_us + int(round(down_st.chainage_km * 1000.0 / v * US_PER_S))
    if start_us is None:
        start_us = (entry - int(cfg.acoustic_margin_s * US_PER_S)) if entry is not None else cfg.start_us
    if duration_s is None:
        duration_s = ((exit_ - start_us) / US_PER_S + cfg.acoustic_margin_s
                      if exit_ is not None else 7200.0)
    fs = cfg.dynamic_rate_hz
    step_us = int(round(US_PER_S / fs))
    start_us = (start_us // step_us) * step_us
    n = int(duration_s * fs)
    t_us = start_us + np.arange(n, dtype=np.int64) * step_us
    t_s = (t_us - start_us) / US_PER_S

    seed_key = [cfg.seed, 1, int(start_us // US_PER_S) % (2 ** 31),
                sum(ord(ch) for ch in segment.name)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_key)))
    over = 8
    fine_fs = fs * over
    lead = 2 * length_m / c + 10.0
    n_fine = int((duration_s + lead) * fine_fs) + 16
    src = _bandlimited_source(cfg, n_fine, fine_fs, rng)
    fine_t = np.arange(n_fine) / fine_fs - lead

    def source_at(tt: np.ndarray) -> np.ndarray:
        return np.interp(tt, fine_t, src)

    direct = length_m / c
    up = source_at(t_s)
    down = cfg.downstream_gain * source_at(t_s - direct)
    positions = np.full(n, np.nan)
    if pig_event is not None:
        x = (t_us - entry) / US_PER_S * pig_event.velocity_m_s
        inside = (x > 0) & (x < length_m)
        positions[inside] = x[inside]
        if gain != 0.0:
            up[inside] += gain * source_at(t_s[inside] - 2.0 * x[inside] / c)
    if cfg.dynamic_noise_kpa > 0:
        up = up + cfg.dynamic_noise_kpa * rng.standard_normal(n)
        down = down + cfg.dynamic_noise_kpa * rng.standard_normal(n)
    a = PressureSeries(up_st.id, ChannelKind.DYNAMIC_KPA, t_us, up, fs)
    b = PressureSeries(down_st.id, ChannelKind.DYNAMIC_KPA, t_us, down, fs)
    truth = AcousticTruth(segment, direct, t_us, positions,
                          None if pig_event is None else pig_event.velocity_m_s, entry, exit_)
    return a, b, truth


def write_scenario(out_dir: str | Path, cfg: ScenarioConfig, static: dict[str, PressureSeries],
                   truth: StaticTruth,
                   acoustic: tuple[PressureSeries, PressureSeries, AcousticTruth] | None = None) -> None:
    """Write raw CSVs, ground truth and ``scenario.meta`` under ``out_dir``."""
    out = Path(out_dir)
    for sid, s in static.items():
        write_csv_series(out / "raw" / f"{sid}_static.csv", s)
    write_segmentation_csv(out / "truth" / "ground_truth_labels.csv", truth.labels)
    segs = all_segments(cfg.stations)
    lines = ["bin_start_us," + ",".join(s.name for s in segs)]
    h = truth.head_loss
    lines += [f"{int(tt)}," + ",".join(fmt(v) for _ in segs) for tt, v in zip(h.times_us, h.values)]
    atomic_write_text(out / "truth" / "ground_truth_head_loss.csv", "\n".join(lines) + "\n")
    ev = ["time_us,removal_fraction,velocity_m_s"]
    ev += [f"{e.time_us},{fmt(e.removal_fraction)},{fmt(e.velocity_m_s)}" for e in truth.pig_events]
    atomic_write_text(out / "truth" / "ground_truth_pig_events.csv", "\n".join(ev) + "\n")
    if acoustic is not None:
        a, b, at = acoustic
        write_csv_series(out / "acoustic" / f"{a.station}_dynamic.csv", a)
        write_csv_series(out / "acoustic" / f"{b.station}_dynamic.csv", b)
        tr = ["time_us,position_m"]
        tr += [f"{int(tt)},{fmt(x)}" for tt, x in zip(at.times_us, at.positions_m) if not np.isnan(x)]
        atomic_write_text(out / "truth" / "ground_truth_trajectory.csv", "\n".join(tr) + "\n")
    meta = cfg.to_meta()
    if acoustic is not None:
        meta["acoustic_segment"] = acoustic[2].segment.name
    atomic_write_text(out / "scenario.meta",
                      "".join(f"{k} = {v}\n" for k, v in meta.items()))

