import numpy as np
import pytest

from pigwatch.cleanse import OutlierPolicy, label_agreement, remove_outliers
from pigwatch.hydraulics import compensation_table
from pigwatch.pipeline import cleanse_station
from pigwatch.series import SegmentMeta, to_us
from pigwatch.synth import (DAY_S, PigEvent, ScenarioConfig, fouling_head_loss,
                            generate_acoustic_scenario, generate_static_scenario, write_scenario,
                            zero_noise)

AB = SegmentMeta("A", "B", 59.307)


def _dir_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_same_seed_byte_identical(tmp_path):
    cfg = ScenarioConfig(span_days=20, pig_events=(PigEvent(to_us("2013-06-05T08:00:00")),))
    for d in ("a", "b"):
        static, truth = generate_static_scenario(cfg)
        ac = generate_acoustic_scenario(cfg, AB, cfg.pig_events[0], duration_s=1800.0)
        write_scenario(tmp_path / d, cfg, static, truth, ac)
    a, b = _dir_bytes(tmp_path / "a"), _dir_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    meta = (tmp_path / "a" / "scenario.meta").read_text()
    assert "rng_algorithm = numpy.random.PCG64" in meta and "seed = 20130601" in meta


def test_different_seed_differs():
    a, _ = generate_static_scenario(ScenarioConfig(span_days=5, seed=1))
    b, _ = generate_static_scenario(ScenarioConfig(span_days=5, seed=2))
    assert not np.array_equal(a["A"].values, b["A"].values)


def test_steady_state():
    cfg = zero_noise(ScenarioConfig(span_days=10, fouling_rate_bar_per_km_per_day=0.0,
                                    initial_fouling_days=0.0, transport_dwell_s=1e12,
                                    transport_ripple_bar=0.0, pig_events=()))
    raw, truth = generate_static_scenario(cfg)
    assert np.all(truth.head_loss.values == cfg.baseline_head_loss_bar_per_km)
    dp = {e.station: e.dp_bar for e in compensation_table(cfg.stations, cfg.fluid)}
    diff = (raw["A"].values - dp["A"]) - (raw["C"].values - dp["C"])
    assert np.ptp(diff) < 1e-12
    assert np.all(raw["C"].values == cfg.delivery_pressure_bar)


def test_closed_form_sawtooth():
    start = to_us("2013-06-01")
    cfg = ScenarioConfig(span_days=150, fouling_rate_bar_per_km_per_day=0.001,
                         initial_fouling_days=0.0,
                         pig_events=(PigEvent(start + int(100 * DAY_S) * 1_000_000, 1.0),))
    day = 86_400 * 1_000_000
    t = start + np.array([0, 50 * day, 100 * day - 1, 100 * day, 120 * day])
    h = fouling_head_loss(cfg, t) - cfg.baseline_head_loss_bar_per_km
    assert h[0] == 0.0
    assert h[1] == pytest.approx(0.05, abs=1e-12)
    assert h[2] == pytest.approx(0.1, abs=1e-9)
    assert h[3] == 0.0
    assert h[4] == pytest.approx(0.02, abs=1e-12)


def test_partial_removal():
    start = to_us("2013-06-01")
    cfg = ScenarioConfig(fouling_rate_bar_per_km_per_day=0.001, initial_fouling_days=0.0,
                         pig_events=(PigEvent(start + 10 * 86_400 * 1_000_000, 0.5),))
    h = fouling_head_loss(cfg, np.array([start + 10 * 86_400 * 1_000_000]))
    assert h[0] - cfg.baseline_head_loss_bar_per_km == pytest.approx(0.005, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        PigEvent(0, removal_fraction=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(fouling_rate_bar_per_km_per_day=-1)
    with pytest.raises(ValueError):
        ScenarioConfig(stations=tuple(reversed(ScenarioConfig().stations)))
    with pytest.raises(ValueError):
        ScenarioConfig(static_noise_bar=-0.1)


def test_values_respect_policy_except_injected(default_scenario):
    cfg, raw, truth = default_scenario
    lo, hi = OutlierPolicy().static_min_bar, OutlierPolicy().static_max_bar
    for sid, s in raw.items():
        injected = np.isin(s.t_us, truth.outlier_times_us[sid])
        assert injected.sum() == cfg.outliers_per_station
        inside = (s.values >= lo) & (s.values <= hi)
        assert np.all(inside[~injected]) and not np.any(inside[injected])
        _, removed = remove_outliers(s)
        assert removed == cfg.outliers_per_station


def test_regime_recovery_default_noise(default_scenario):
    cfg, raw, truth = default_scenario
    for s in raw.values():
        assert label_agreement(cleanse_station(s).states, truth.labels) >= 0.95


def test_echo_zero_equals_no_pig():
    cfg = ScenarioConfig()
    ev = cfg.pig_events[0]
    kw = dict(start_us=ev.time_us, duration_s=1200.0)
    u0, d0, _ = generate_acoustic_scenario(cfg, AB, ev, echo_gain=0.0, **kw)
    u1, d1, _ = generate_acoustic_scenario(cfg, AB, None, **kw)
    assert np.array_equal(u0.values, u1.values) and np.array_equal(d0.values, d1.values)


def test_acoustic_truth_positions():
    cfg = ScenarioConfig()
    ev = cfg.pig_events[0]
    up, down, truth = generate_acoustic_scenario(cfg, AB, ev)
    assert up.nominal_rate_hz == 2.0 and len(up) == len(down)
    assert truth.direct_delay_s == pytest.approx(59_307 / cfg.sound_speed_m_s)
    inside = ~np.isnan(truth.positions_m)
    assert np.all(np.diff(truth.positions_m[inside]) > 0)
    assert truth.positions_m[inside].max() <= 59_307
    assert (truth.exit_us - truth.entry_us) / 1e6 == pytest.approx(59_307 / 1.163, abs=1)


def test_acoustic_rejects_reversed_segment():
    with pytest.raises(ValueError):
        generate_acoustic_scenario(ScenarioConfig(), SegmentMeta("B", "A", 59.307))
