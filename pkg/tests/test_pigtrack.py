import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pigwatch.pigtrack import (CorrelationMap, TrackerConfig, build_correlation_map,
                               detect_baseline_lag, extract_trajectory, lag_to_position,
                               position_to_lag, track, windowed_xcorr, write_map_csv,
                               write_trajectory_csv, xcorr_direct)
from pigwatch.series import SegmentMeta, SeriesError, UniformSeries, resample_uniform
from pigwatch.synth import PigEvent, ScenarioConfig, generate_acoustic_scenario

AB = SegmentMeta("A", "B", 59.307)
AC = SegmentMeta("A", "C", 100.486)
CFG = TrackerConfig()
C = CFG.sound_speed_m_s


def test_autocorrelation_peak(rng):
    a = rng.standard_normal(600)
    r = windowed_xcorr(a, a, 50)
    assert abs(r[50] - 1.0) <= 1e-9
    assert int(np.argmax(r)) == 50


def test_pure_delay(rng):
    x = rng.standard_normal(707)
    a, b = x[7:], x[:-7]  # b lags a by 7 samples
    r = windowed_xcorr(a, b, 20)
    assert int(np.argmax(r)) - 20 == 7
    assert r.max() > 0.98


def test_independent_noise_bound():
    n = 4800
    r = np.random.default_rng(7)
    peaks = [np.abs(windowed_xcorr(r.standard_normal(n), r.standard_normal(n), 100)).max()
             for _ in range(100)]
    assert max(peaks) < 5 / math.sqrt(n)


def test_zero_variance_gives_zeros(rng):
    assert np.all(windowed_xcorr(np.ones(100), rng.standard_normal(100), 10) == 0)


def test_xcorr_preconditions():
    with pytest.raises(ValueError):
        windowed_xcorr(np.ones(10), np.ones(11), 2)
    with pytest.raises(ValueError):
        windowed_xcorr(np.ones(10), np.ones(10), 5)


@given(st.integers(0, 10_000), st.integers(8, 64), st.integers(0, 3))
def test_fft_matches_direct_sum(seed, n, max_lag):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(n), r.standard_normal(n)
    assert np.allclose(windowed_xcorr(a, b, max_lag), xcorr_direct(a, b, max_lag), atol=1e-12)


@given(st.lists(st.floats(-1e3, 1e3), min_size=12, max_size=80), st.integers(0, 2**32 - 1),
       st.floats(1e-3, 1e3))
def test_correlation_bounded(vals, seed, scale):
    a = np.array(vals)
    b = scale * np.random.default_rng(seed).standard_normal(a.size) + a[::-1]
    r = windowed_xcorr(a, b, (a.size - 1) // 2 - 1)
    assert np.all(np.abs(r) <= 1.0)


@given(st.integers(0, 10_000), st.integers(0, 15))
def test_delay_covariance(seed, k):
    r = np.random.default_rng(seed)
    x = r.standard_normal(400 + 32)
    a = x[16:16 + 400]
    base = int(np.argmax(windowed_xcorr(a, x[16:16 + 400], 40)))
    delayed = int(np.argmax(windowed_xcorr(a, x[16 - k:16 - k + 400], 40)))
    assert delayed - base == k


def _uniform(s):
    return resample_uniform(s, 1.0 / s.nominal_rate_hz)


def _scenario(event=None, duration=None, seg=AB, **kw):
    cfg = ScenarioConfig(**kw)
    up, down, truth = generate_acoustic_scenario(cfg, seg, event, duration_s=duration)
    return _uniform(up), _uniform(down), truth


def test_map_bound_and_direct_ridge():
    up, down, truth = _scenario(duration=3600.0)
    cmap = build_correlation_map(up, down, CFG)
    assert np.all(np.abs(cmap.values) <= 1.0)
    assert cmap.values.shape == (len(cmap.times_us), cmap.lags_s.size)
    ridge = cmap.lags_s[np.argmax(cmap.values, axis=1)]
    assert np.all(np.abs(ridge + truth.direct_delay_s) <= cmap.lag_step_s)
    assert abs(detect_baseline_lag(cmap) + AB.length_km * 1000 / C) <= cmap.lag_step_s


def test_stationary_reflector_two_ridges():
    # a PIG far too slow to move during the record acts as a fixed reflector at x
    cfg = ScenarioConfig()
    x = 20_000.0
    v = 1e-6
    start = cfg.start_us
    event = PigEvent(start - int(x / v * 1e6), 1.0, v)
    up, down, _ = generate_acoustic_scenario(cfg, AB, event, start_us=start, duration_s=3600.0)
    cmap = build_correlation_map(_uniform(up), _uniform(down), CFG)
    med = np.median(cmap.values, axis=0)
    tau0 = -AB.length_km * 1000 / C
    echo = tau0 + 2 * x / C
    far = np.abs(cmap.lags_s - tau0) > 3
    assert abs(cmap.lags_s[np.argmax(med)] - tau0) <= 0.5
    assert abs(cmap.lags_s[far][np.argmax(med[far])] - echo) <= 0.5


def test_all_missing_map_is_flagged():
    u = UniformSeries(0, 0.5, np.full(2000, np.nan))
    cmap = build_correlation_map(u, u, CFG)
    assert len(cmap) > 0 and cmap.flagged.all() and np.all(cmap.values == 0)


def test_map_requires_overlap():
    a = UniformSeries(0, 0.5, np.ones(100))
    b = UniformSeries(10**9, 0.5, np.ones(100))
    with pytest.raises(SeriesError):
        build_correlation_map(a, b, CFG)


def test_map_entries_match_pearson(rng):
    a = rng.standard_normal(1200)
    b = rng.standard_normal(1200)
    cfg = TrackerConfig(window_s=30, hop_s=30, max_lag_s=5)
    cmap = build_correlation_map(UniformSeries(0, 0.5, b), UniformSeries(0, 0.5, a), cfg)
    w, lag = 60, 10
    col = 3
    off = lag + col * 60
    t = a[off:off + w]
    for j, l in enumerate(range(-lag, lag + 1)):
        s = b[off + l:off + l + w]
        assert cmap.values[col, j] == pytest.approx(np.corrcoef(t, s)[0, 1], abs=1e-9)


def test_lag_position_examples():
    tau0 = -50.0
    D = AB.length_km * 1000
    assert lag_to_position(tau0, tau0, CFG) == 0
    assert lag_to_position(tau0 + 2 * D / C, tau0, CFG) == pytest.approx(D)
    assert lag_to_position(0.0, tau0, CFG) == pytest.approx(29_653.5)
    assert lag_to_position(tau0 - 5, tau0, CFG, D) == 0
    assert lag_to_position(tau0 + 500, tau0, CFG, D) == D


@given(st.floats(0, 59_307), st.floats(-120, 0))
def test_position_lag_identity(x, tau0):
    back = lag_to_position(position_to_lag(x, tau0, CFG), tau0, CFG, 59_307)
    assert back == pytest.approx(x, abs=1e-6)


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(hop_s=90)
    with pytest.raises(ValueError):
        TrackerConfig(max_lag_s=0)


def test_track_ab_passage():
    cfg = ScenarioConfig()
    up, down, truth = _scenario(cfg.pig_events[0])
    cmap, traj = track(up, down, AB, CFG)
    D_c = truth.direct_delay_s
    assert traj is not None
    assert abs(traj.velocity_m_s - 1.163) / 1.163 < 0.05
    assert abs(traj.start_lag_s + D_c) <= 2 * cmap.lag_step_s
    assert abs(traj.end_lag_s - D_c) <= 2 * cmap.lag_step_s
    assert np.all(np.diff(traj.lags_s) >= 0) and np.all(np.diff(traj.times_us) > 0)
    assert np.all((traj.scores >= 0) & (traj.scores <= 1))
    assert np.all((traj.positions_m >= 0) & (traj.positions_m <= AB.length_km * 1000))
    assert abs(traj.departure_us - truth.entry_us) < 600e6
    assert abs(traj.eta_us - truth.exit_us) < 600e6


def test_no_pig_gives_none():
    up, down, _ = _scenario(duration=60_000.0)
    cmap, traj = track(up, down, AB, CFG)
    assert traj is None


def test_zero_echo_gives_none():
    cfg = ScenarioConfig()
    up, down, _ = _scenario(cfg.pig_events[0], echo_gain=0.0)
    assert track(up, down, AB, CFG)[1] is None


def test_day_long_transit_velocity():
    v = 100_486 / 86_400
    cfg = ScenarioConfig()
    event = PigEvent(cfg.pig_events[0].time_us, 1.0, v)
    up, down, _ = _scenario(event, seg=AC)
    _, traj = track(up, down, AC, CFG)
    assert traj is not None
    assert abs(traj.velocity_m_s - v) / v < 0.05


def test_extract_rejects_weak_paths():
    lags = np.arange(-240, 241) * 0.5
    vals = np.zeros((400, lags.size))
    vals[:, np.searchsorted(lags, -50.0)] = 1.0
    cmap = CorrelationMap(np.arange(400, dtype=np.int64) * 30_000_000, lags, vals,
                          np.zeros(400, dtype=bool))
    assert extract_trajectory(cmap, CFG, AB) is None


def test_map_and_trajectory_csv(tmp_path):
    cfg = ScenarioConfig()
    up, down, _ = _scenario(cfg.pig_events[0])
    cmap, traj = track(up, down, AB, CFG)
    write_map_csv(tmp_path / "m.csv", cmap)
    write_trajectory_csv(tmp_path / "t.csv", traj)
    head = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert head[0] == "time_us" and float(head[1]) == -120.0 and len(head) == cmap.lags_s.size + 1
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "time_us,lag_s,position_m,score" and len(lines) == len(traj) + 1
    write_trajectory_csv(tmp_path / "none.csv", None)
    assert (tmp_path / "none.csv").read_text() == "time_us,lag_s,position_m,score\n"
