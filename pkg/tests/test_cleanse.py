import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pigwatch.cleanse import (CleanseError, GmmModel, OutlierPolicy, StateFeatureRow, StateLabel,
                              StateSegmentation, classify_states, component_labels, fit_gmm,
                              keep_mask, label_agreement, mask_pair, mask_series,
                              read_segmentation_csv, remove_outliers, state_features,
                              write_segmentation_csv)
from pigwatch.pipeline import cleanse_station
from pigwatch.series import ChannelKind, PressureSeries, UniformSeries

S = 1_000_000


def _ps(values, channel=ChannelKind.STATIC_BAR):
    v = np.asarray(values, dtype=float)
    return PressureSeries("A", channel, np.arange(v.size, dtype=np.int64) * S, v, 1.0)


def test_static_thresholds():
    out, removed = remove_outliers(_ps([0.3, 45.0, 81.0]))
    assert out.values.tolist() == [45.0] and removed == 2


def test_dynamic_thresholds():
    out, removed = remove_outliers(_ps([-250, 0, 150, 220], ChannelKind.DYNAMIC_KPA))
    assert out.values.tolist() == [0.0, 150.0] and removed == 2


def test_bounds_are_retained():
    out, _ = remove_outliers(_ps([0.5, 80.0]))
    assert out.values.tolist() == [0.5, 80.0]


def test_in_range_identity():
    s = _ps([1.0, 2.0, 3.0])
    out, removed = remove_outliers(s)
    assert removed == 0 and np.array_equal(out.values, s.values)
    assert np.array_equal(out.t_us, s.t_us)


def test_policy_validation():
    with pytest.raises(CleanseError):
        OutlierPolicy(static_min_bar=5, static_max_bar=5)


@given(st.lists(st.floats(-300, 300), max_size=50))
def test_remove_outliers_idempotent(vals):
    for ch in ChannelKind:
        once, _ = remove_outliers(_ps(vals, ch))
        twice, removed = remove_outliers(once)
        assert removed == 0 and np.array_equal(once.values, twice.values)


def test_state_features_examples():
    rows = state_features(UniformSeries(0, 60, np.full(20, 40.0)), 600)
    assert len(rows) == 2 and all(r.mean_bar == 40.0 and r.std_bar == 0.0 for r in rows)
    rows = state_features(UniformSeries(0, 60, np.tile([39.0, 41.0], 5)), 600)
    assert rows[0].mean_bar == 40.0 and rows[0].std_bar == 1.0
    v = np.full(20, 40.0)
    v[12] = np.nan
    rows = state_features(UniformSeries(0, 60, v), 600)
    assert [r.window_start for r in rows] == [0]


def _cloud(rng, centers, sizes, spread=0.5):
    return np.vstack([rng.normal(c, spread, (n, 2)) for c, n in zip(centers, sizes)])


def test_gmm_two_clouds(rng):
    x = _cloud(rng, [(0, 0), (10, 10)], [600, 400])
    m = fit_gmm(x, 2)
    order = np.argsort(m.raw_means[:, 0])
    assert np.allclose(m.raw_means[order], [[0, 0], [10, 10]], atol=0.1)
    assert np.allclose(m.weights[order], [0.6, 0.4], atol=1e-6)
    assert abs(m.weights.sum() - 1) < 1e-9
    assert m.converged


def test_gmm_single_component_closed_form(rng):
    x = rng.normal([3.0, 1.0], [2.0, 0.5], (200, 2))
    m = fit_gmm(x, 1)
    assert np.allclose(m.raw_means[0], x.mean(axis=0), rtol=1e-12, atol=1e-12)
    assert np.allclose(m.raw_variances[0], x.var(axis=0), rtol=1e-9)


def test_gmm_nested_model_likelihood(rng):
    x = rng.normal(0, 1, (300, 2))
    x = np.vstack([x, x])
    one, two = fit_gmm(x, 1), fit_gmm(x, 2)
    assert abs(two.weights.sum() - 1) < 1e-9
    assert two.log_likelihood >= one.log_likelihood - 1e-9


def test_gmm_errors():
    with pytest.raises(CleanseError, match="at least 30"):
        fit_gmm(np.ones((29, 2)) * np.arange(29)[:, None], 3)
    with pytest.raises(CleanseError, match="identical"):
        fit_gmm(np.ones((100, 2)), 3)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_em_likelihood_monotone(seed, k):
    r = np.random.default_rng(seed)
    x = np.vstack([r.normal(r.uniform(-5, 5, 2), r.uniform(0.1, 2), (40, 2)) for _ in range(3)])
    m = fit_gmm(x, k)
    h = np.array(m.ll_history)
    assert np.all(np.diff(h) >= -1e-9 * np.maximum(1.0, np.abs(h[:-1])))
    assert np.all(m.variances >= 1e-6)
    assert np.all(m.weights >= 0) and abs(m.weights.sum() - 1) < 1e-9


def _regime_rows(rng, n=(60, 30, 200)):
    rows, truth = [], []
    specs = [(StateLabel.OFF, 1.0, 0.05), (StateLabel.REGULATION, 30.0, 3.0),
             (StateLabel.TRANSPORT, 40.0, 0.3)]
    t = 0
    for (lab, mu, sd), count in zip(specs, n):
        for _ in range(count):
            w = rng.normal(mu, sd, 10)
            rows.append(StateFeatureRow(t, float(w.mean()), float(w.std())))
            truth.append(lab)
            t += 600 * S
    return rows, truth


def test_classify_injected_regimes(rng):
    rows, truth = _regime_rows(rng)
    seg = classify_states(fit_gmm(rows, 3), rows)
    agree = np.mean([a is b for a, b in zip(seg.labels, truth)])
    assert agree >= 0.95


def test_window_at_component_mean(rng):
    rows, _ = _regime_rows(rng)
    m = fit_gmm(rows, 3)
    labels = component_labels(m)
    for i in range(3):
        mu = m.raw_means[i]
        seg = classify_states(m, [StateFeatureRow(0, float(mu[0]), float(mu[1]))])
        assert seg.labels[0] is labels[i]


def test_all_transport_trace(rng):
    u = UniformSeries(0, 60, 40.0 + 0.3 * rng.standard_normal(60 * 24 * 10))
    c = cleanse_station(PressureSeries("A", ChannelKind.STATIC_BAR, u.times_us, u.values, 1 / 60))
    assert all(lab is StateLabel.TRANSPORT for lab in c.states.labels)


def test_indistinct_components_stay_transport(rng):
    rows, _ = _regime_rows(rng)
    m = fit_gmm(rows, 3)
    assert sorted(l.value for l in component_labels(m)) == ["OFF", "REGULATION", "TRANSPORT"]
    assert component_labels(m, min_off_drop=0.99).count(StateLabel.OFF) == 0
    assert component_labels(m, min_regulation_ratio=1e6).count(StateLabel.REGULATION) == 0


def test_classify_requires_three_components(rng):
    m = fit_gmm(rng.normal(0, 1, (100, 2)), 2)
    with pytest.raises(CleanseError):
        classify_states(m, [StateFeatureRow(0, 0.0, 1.0)])


def test_label_mapping_permutation_invariant(rng):
    rows, _ = _regime_rows(rng)
    m = fit_gmm(rows, 3)
    base = classify_states(m, rows)
    for perm in ([1, 2, 0], [2, 1, 0], [0, 2, 1]):
        pm = dataclasses.replace(m, weights=m.weights[perm], means=m.means[perm],
                                 variances=m.variances[perm])
        assert classify_states(pm, rows).labels == base.labels


def _seg(labels, window_s=600):
    return StateSegmentation(window_s, np.arange(len(labels), dtype=np.int64) * int(window_s * S),
                             tuple(labels))


def test_mask_examples():
    u = UniformSeries(0, 60, np.arange(40.0))
    T, O = StateLabel.TRANSPORT, StateLabel.OFF
    assert np.array_equal(mask_series(u, _seg([T] * 4)).values, u.values)
    assert mask_series(u, _seg([O] * 4)).missing.all()
    alt = mask_series(u, _seg([T, O, T, O]))
    assert alt.missing.tolist() == ([False] * 10 + [True] * 10) * 2


def test_uncovered_bins_are_masked():
    u = UniformSeries(0, 60, np.arange(25.0))
    m = mask_series(u, _seg([StateLabel.TRANSPORT] * 2))
    assert m.missing[20:].all() and not m.missing[:20].any()


@given(st.lists(st.sampled_from(list(StateLabel)), min_size=1, max_size=12),
       st.integers(0, 30))
def test_mask_never_changes_retained(labels, offset):
    vals = np.sin(np.arange(len(labels) * 10 + offset, dtype=float))
    u = UniformSeries(0, 60, vals)
    m = mask_series(u, _seg(labels))
    ok = ~m.missing
    assert np.array_equal(m.values[ok], u.values[ok])


def test_joint_mask_is_intersection():
    u = UniformSeries(0, 60, np.ones(40))
    T, R = StateLabel.TRANSPORT, StateLabel.REGULATION
    a, b = mask_pair(u, _seg([T, T, R, T]), u, _seg([T, R, T, T]))
    expect = [False] * 10 + [True] * 20 + [False] * 10
    assert a.missing.tolist() == expect and b.missing.tolist() == expect


def test_joint_mask_on_synth_leaves_transport_only(default_scenario):
    cfg, raw, truth = default_scenario
    ca, cb = cleanse_station(raw["A"]), cleanse_station(raw["B"])
    a, b = mask_pair(ca.grid, ca.states, cb.grid, cb.states)
    kept = ~a.missing
    assert np.array_equal(kept, ~b.missing)
    true_transport = keep_mask(a, truth.labels, StateLabel.TRANSPORT)
    assert np.mean(true_transport[kept]) >= 0.999


def test_segmentation_csv_round_trip(tmp_path):
    seg = _seg([StateLabel.OFF, StateLabel.TRANSPORT, StateLabel.REGULATION])
    write_segmentation_csv(tmp_path / "s.csv", seg)
    assert (tmp_path / "s.csv").read_text().splitlines()[1].endswith(",OFF")
    back = read_segmentation_csv(tmp_path / "s.csv")
    assert back.labels == seg.labels and np.array_equal(back.window_starts, seg.window_starts)
    assert label_agreement(seg, back) == 1.0


def test_segmentation_rejects_unordered():
    with pytest.raises(CleanseError):
        StateSegmentation(600, np.array([600, 0]), (StateLabel.OFF, StateLabel.OFF))


def test_gmm_model_is_deterministic(rng):
    rows, _ = _regime_rows(rng)
    a, b = fit_gmm(rows, 3), fit_gmm(rows, 3)
    assert a.log_likelihood == b.log_likelihood and np.array_equal(a.means, b.means)
    assert isinstance(a, GmmModel)
