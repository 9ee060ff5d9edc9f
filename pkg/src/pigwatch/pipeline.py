"""Stage functions chaining cleansing, head loss, features and training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cleanse import (GmmModel, OutlierPolicy, StateLabel, StateSegmentation, detect_states,
                      mask_pair, remove_outliers)
from .features import (Dataset, MappingConfig, assemble_dataset, build_pig_indicator,
                       fit_mapping, rolling_features)
from .hydraulics import (WEEK_S, FluidProps, HeadLossSeries, compensate, compensation_table,
                         head_loss_series)
from .regressor import ProtocolSpans, TrainConfig, run_protocol
from .series import (PressureSeries, SegmentMeta, StationMeta, UniformSeries, align_to,
                     resample_uniform)

GRID_STEP_S = 60.0
STATE_WINDOW_S = 600.0


@dataclass(frozen=True)
class CleansedStation:
    station: str
    grid: UniformSeries              # outlier-free, resampled, not yet state-masked
    states: StateSegmentation
    model: GmmModel
    outliers_removed: int


def cleanse_station(raw: PressureSeries, policy: OutlierPolicy = OutlierPolicy(),
                    step_s: float = GRID_STEP_S, window_s: float = STATE_WINDOW_S,
                    start_us: int | None = None, end_us: int | None = None) -> CleansedStation:
    clean, removed = remove_outliers(raw, policy)
    grid = resample_uniform(clean, step_s, "mean", start_us=start_us, end_us=end_us)
    states, model = detect_states(grid, window_s)
    return CleansedStation(raw.station, grid, states, model, removed)


def common_grid(grids: Sequence[UniformSeries]) -> tuple[int, int]:
    """(start_us, n_bins) covering every grid; all must share step and alignment."""
    start = min(g.start_us for g in grids)
    end = max(g.end_us for g in grids)
    step = grids[0].step_us
    return start, (end - start) // step


def segment_head_loss(cleansed: Mapping[str, CleansedStation], stations: Sequence[StationMeta],
                      segment: SegmentMeta, fluid: FluidProps = FluidProps(),
                      window_s: float = WEEK_S) -> HeadLossSeries:
    """Jointly transport-masked, altitude-compensated head loss for one segment."""
    up, down = cleansed[segment.upstream], cleansed[segment.downstream]
    return joint_head_loss(up.grid, up.states, down.grid, down.states, stations, segment,
                           fluid, window_s)


def joint_head_loss(up_grid: UniformSeries, up_states: StateSegmentation,
                    down_grid: UniformSeries, down_states: StateSegmentation,
                    stations: Sequence[StationMeta], segment: SegmentMeta,
                    fluid: FluidProps = FluidProps(), window_s: float = WEEK_S) -> HeadLossSeries:
    start, n = common_grid([up_grid, down_grid])
    ug, dg = align_to(up_grid, start, n), align_to(down_grid, start, n)
    um, dm = mask_pair(ug, up_states, dg, down_states, StateLabel.TRANSPORT)
    dp = {e.station: e.dp_pa for e in compensation_table(stations, fluid)}
    return head_loss_series(compensate(um, dp[segment.upstream]),
                            compensate(dm, dp[segment.downstream]), segment, window_s)


def build_dataset(hl: HeadLossSeries, train_from: int, train_to: int,
                  lo_percentile: float = 1.0, hi_percentile: float = 99.0
                  ) -> tuple[Dataset, MappingConfig]:
    mapping = fit_mapping(hl.long_term, train_from, train_to, lo_percentile, hi_percentile)
    ind = build_pig_indicator(hl.long_term, mapping, hl.segment)
    return assemble_dataset(rolling_features(hl.short_term), ind, hl.segment.name), mapping


def build_datasets(head_losses: Mapping[str, HeadLossSeries], spans: ProtocolSpans,
                   lo_percentile: float = 1.0, hi_percentile: float = 99.0
                   ) -> tuple[dict[str, Dataset], dict[str, MappingConfig]]:
    """Per-segment datasets; every indicator mapping is fitted on that segment's training span."""
    datasets, mappings = {}, {}
    for name, hl in head_losses.items():
        datasets[name], mappings[name] = build_dataset(hl, spans.train_from, spans.train_to,
                                                       lo_percentile, hi_percentile)
    return datasets, mappings


def full_chain(raw: Mapping[str, PressureSeries], stations: Sequence[StationMeta],
               segments: Sequence[SegmentMeta], fluid: FluidProps = FluidProps(),
               spans: ProtocolSpans = ProtocolSpans(), train_cfg: TrainConfig = TrainConfig(),
               policy: OutlierPolicy = OutlierPolicy()):
    """Raw static series to protocol reports; returns (reports, model, datasets, head losses)."""
    cleansed = {sid: cleanse_station(s, policy) for sid, s in raw.items()}
    hls = {seg.name: segment_head_loss(cleansed, stations, seg, fluid) for seg in segments}
    datasets, _ = build_datasets(hls, spans)
    model, reports = run_protocol(datasets, train_cfg, spans)
    return reports, model, datasets, hls


def latest_value(u: UniformSeries) -> tuple[int, float] | None:
    ok = np.flatnonzero(~u.missing)
    if ok.size == 0:
        return None
    i = int(ok[-1])
    return int(u.times_us[i]), float(u.values[i])
