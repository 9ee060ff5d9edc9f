"""Batch command line: synth, cleanse, headloss, track, train, predict, report.

Every stage reads its inputs from and writes its artifacts under one
working directory (``--out``, or ``[paths]`` in the config)::

    raw/<id>_static.csv          input static pressure (bar)
    acoustic/<id>_dynamic.csv    input dynamic pressure (kPa)
    cleanse/<id>_grid.csv        outlier-free 60 s grid
    cleanse/<id>_states.csv      operating regime per window
    headloss/<seg>.csv           short- and long-term head loss
    track/<seg>_map.csv          correlation map (plus _map.svg)
    track/<seg>_trajectory.csv   extracted PIG track
    features/<seg>.csv           feature rows and indicator target
    model/tree.txt               trained regression tree
    predict/<seg>.csv            predicted and observed indicator
    report/report.csv            latest probability per segment, ranked

Exit status is 0 on success, 1 when a stage fails (including missing
inputs) and 2 for invalid arguments or configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .cleanse import (CleanseError, StateLabel, keep_mask, read_segmentation_csv,
                      write_segmentation_csv)
from .config import ConfigError, RunConfig, load_config
from .features import (FEATURE_NAMES, MappingConfig, build_pig_indicator, rolling_features,
                       write_dataset_csv)
from .hydraulics import read_head_loss_csv, write_head_loss_csv
from .pigtrack import track, write_trajectory_csv
from .pipeline import build_datasets, cleanse_station, joint_head_loss, latest_value
from .regressor import load_model, run_protocol, save_model
from .series import (ChannelKind, SegmentMeta, UniformSeries, atomic_write_text, fmt, iso,
                     load_csv_series, read_uniform_csv, resample_uniform,
                     to_us, write_uniform_csv)
from .svgplot import write_bar_chart, write_heatmap, write_line_chart
from .synth import DAY_S, generate_acoustic_scenario, generate_static_scenario, write_scenario

MAPPING_HEADER = "segment,h_lo,h_hi,lo_percentile,hi_percentile"
EVAL_HEADER = "segment,rms_error,accuracy_pct,rows,from,to"
PREDICT_COLUMNS = ("predicted", "indicator")


class StageError(Exception):
    """A stage could not run; the message is the one-line diagnostic."""


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise StageError(f"missing input file: {path} (produced by `{producer}`)")
    return path


class Context:
    def __init__(self, cfg: RunConfig, args: argparse.Namespace):
        self.cfg = cfg
        self.args = args
        self.out = Path(args.out) if args.out else cfg.output_dir
        self.inp = cfg.input_dir if cfg.input_dir is not None else self.out
        self.t_from = to_us(args.from_) if args.from_ else None
        self.t_to = to_us(args.to) if args.to else None
        if self.t_from is not None and self.t_to is not None and self.t_from >= self.t_to:
            raise ConfigError("--from must precede --to")

    def segments(self) -> list[SegmentMeta]:
        if self.args.segment:
            return [self.cfg.segment(self.args.segment)]
        return self.cfg.segments

    def say(self, line: str) -> None:
        print(line)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_synth(ctx: Context) -> None:
    scen = ctx.cfg.scenario(ctx.args.seed)
    if ctx.t_from is not None:
        scen = scen.replace(start_us=ctx.t_from)
    if ctx.t_to is not None:
        scen = scen.replace(span_days=(ctx.t_to - scen.start_us) / 1e6 / DAY_S)
    static, truth = generate_static_scenario(scen)
    seg = ctx.cfg.segment(ctx.args.segment or ctx.cfg.track_segment)
    acoustic = None
    if scen.pig_events:
        acoustic = generate_acoustic_scenario(scen, seg, scen.pig_events[0])
    write_scenario(ctx.out, scen, static, truth, acoustic)
    ctx.say(f"synth: {len(static)} stations, {scen.span_days:g} days from {iso(scen.start_us)}, "
            f"seed {scen.seed} -> {ctx.out}")
    if acoustic is not None:
        ctx.say(f"synth: acoustic passage on {seg.name} at {iso(scen.pig_events[0].time_us)}")


def cmd_cleanse(ctx: Context) -> None:
    cfg = ctx.cfg
    for st in cfg.stations:
        path = _require(ctx.inp / "raw" / f"{st.id}_static.csv", "synth or field export")
        raw = load_csv_series(path, st.id, ChannelKind.STATIC_BAR)
        c = cleanse_station(raw, cfg.policy, cfg.grid_step_s, cfg.state_window_s,
                            start_us=ctx.t_from, end_us=ctx.t_to)
        write_uniform_csv(ctx.out / "cleanse" / f"{st.id}_grid.csv", c.grid)
        write_segmentation_csv(ctx.out / "cleanse" / f"{st.id}_states.csv", c.states)
        kept = keep_mask(c.grid, c.states, StateLabel.TRANSPORT)
        write_line_chart(ctx.out / "cleanse" / f"{st.id}_pressure.svg", c.grid.times_us,
                         {"pressure_bar": c.grid.values,
                          "transport_bar": np.where(kept, c.grid.values, np.nan)},
                         title=f"Station {st.id}: static pressure and transport intervals",
                         ylabel="bar")
        share = {lab: sum(l is lab for l in c.states.labels) / max(len(c.states), 1)
                 for lab in StateLabel}
        ctx.say(f"cleanse {st.id}: removed {c.outliers_removed} outliers; " + ", ".join(
            f"{lab.value} {100 * share[lab]:.1f}%" for lab in StateLabel))


def _cleansed(ctx: Context, sid: str):
    grid = read_uniform_csv(_require(ctx.out / "cleanse" / f"{sid}_grid.csv", "cleanse"))
    states = read_segmentation_csv(_require(ctx.out / "cleanse" / f"{sid}_states.csv", "cleanse"),
                                   ctx.cfg.state_window_s)
    return grid, states


def cmd_headloss(ctx: Context) -> None:
    cfg = ctx.cfg
    for seg in ctx.segments():
        ug, us = _cleansed(ctx, seg.upstream)
        dg, ds = _cleansed(ctx, seg.downstream)
        hl = joint_head_loss(ug, us, dg, ds, cfg.stations, seg, cfg.fluid, cfg.moving_average_s)
        write_head_loss_csv(ctx.out / "headloss" / f"{seg.name}.csv", hl)
        write_line_chart(ctx.out / "headloss" / f"{seg.name}_plot.svg", hl.short_term.times_us,
                         {"short_term_bar_per_km": hl.short_term.values,
                          "long_term_bar_per_km": hl.long_term.values},
                         title=f"Head loss {seg.name}", ylabel="bar/km")
        last = latest_value(hl.long_term)
        tail = "no valid bins" if last is None else f"latest long-term {last[1]:.5f} bar/km"
        ctx.say(f"headloss {seg.name}: {tail}")


def _dynamic(ctx: Context, sid: str) -> UniformSeries:
    path = _require(ctx.inp / "acoustic" / f"{sid}_dynamic.csv", "synth or field export")
    s = load_csv_series(path, sid, ChannelKind.DYNAMIC_KPA)
    return resample_uniform(s, 1.0 / s.nominal_rate_hz, "mean", start_us=ctx.t_from, end_us=ctx.t_to)


def cmd_track(ctx: Context) -> None:
    cfg = ctx.cfg
    seg = ctx.cfg.segment(ctx.args.segment or cfg.track_segment)
    up, down = _dynamic(ctx, seg.upstream), _dynamic(ctx, seg.downstream)
    if up.step_us != down.step_us:
        raise StageError(f"{seg.name}: dynamic channels have different sample rates")
    cmap, traj = track(up, down, seg, cfg.tracker)
    if len(cmap) == 0:
        raise StageError(f"{seg.name}: recording too short for a single correlation window")
    base = ctx.out / "track" / seg.name
    overlay = None if traj is None else (traj.times_us, traj.lags_s)
    write_heatmap(f"{base}_map.svg", cmap.times_us, cmap.lags_s, cmap.values,
                  title=f"Cross-correlation map {seg.name}", overlay=overlay)
    write_trajectory_csv(f"{base}_trajectory.csv", traj)
    rows = [("detected", "yes" if traj is not None else "no")]
    if traj is not None:
        rows += [("velocity_m_s", fmt(traj.velocity_m_s)),
                 ("baseline_lag_s", fmt(traj.baseline_lag_s)),
                 ("start_lag_s", fmt(traj.start_lag_s)), ("end_lag_s", fmt(traj.end_lag_s)),
                 ("mean_score", fmt(traj.mean_score)),
                 ("departure", iso(traj.departure_us) if traj.departure_us is not None else ""),
                 ("eta", iso(traj.eta_us) if traj.eta_us is not None else "")]
    atomic_write_text(f"{base}_summary.csv", "key,value\n" + "".join(f"{k},{v}\n" for k, v in rows))
    if traj is None:
        ctx.say(f"track {seg.name}: no PIG detected")
    else:
        ctx.say(f"track {seg.name}: PIG at {traj.velocity_m_s:.3f} m/s, lag {traj.start_lag_s:+.1f} s "
                f"to {traj.end_lag_s:+.1f} s, mean score {traj.mean_score:.3f}")


def _head_losses(ctx: Context, segments: Sequence[SegmentMeta]):
    return {seg.name: read_head_loss_csv(_require(ctx.out / "headloss" / f"{seg.name}.csv",
                                                  "headloss"), seg) for seg in segments}


def cmd_train(ctx: Context) -> None:
    cfg = ctx.cfg
    spans = cfg.spans
    if ctx.t_from is not None or ctx.t_to is not None:
        spans = dataclasses.replace(
            spans, train_from=spans.train_from if ctx.t_from is None else ctx.t_from,
            train_to=spans.train_to if ctx.t_to is None else ctx.t_to)
    segments = ctx.segments()
    if spans.train_segment not in {s.name for s in segments}:
        segments = [cfg.segment(spans.train_segment)] + segments
    hls = _head_losses(ctx, segments)
    datasets, mappings = build_datasets(hls, spans, cfg.lo_percentile, cfg.hi_percentile)
    for name, ds in datasets.items():
        write_dataset_csv(ctx.out / "features" / f"{name}.csv", ds)
    model, reports = run_protocol(datasets, cfg.training, spans)
    save_model(ctx.out / "model" / "tree.txt", model)
    lines = [MAPPING_HEADER] + [f"{n},{fmt(m.h_lo)},{fmt(m.h_hi)},{fmt(m.lo_percentile)},"
                                f"{fmt(m.hi_percentile)}" for n, m in sorted(mappings.items())]
    atomic_write_text(ctx.out / "model" / "mapping.csv", "\n".join(lines) + "\n")
    lines = [EVAL_HEADER] + [f"{r.segment},{fmt(r.rms_error)},{fmt(r.accuracy_pct)},{r.n_rows},"
                             f"{iso(r.span[0])},{iso(r.span[1])}" for r in reports]
    atomic_write_text(ctx.out / "model" / "eval.csv", "\n".join(lines) + "\n")
    ctx.say(f"train: tree with {len(model.feature)} nodes, depth {model.depth}, "
            f"trained on {spans.train_segment} {iso(spans.train_from)}..{iso(spans.train_to)}")
    for r in reports:
        ctx.say("eval " + r.line())


def _read_mappings(path: Path) -> dict[str, MappingConfig]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != MAPPING_HEADER:
            raise StageError(f"{path}: unexpected header")
        for line in fh:
            if line.strip():
                name, lo, hi, plo, phi = line.strip().split(",")
                out[name] = MappingConfig(float(lo), float(hi), float(plo), float(phi))
    return out


def cmd_predict(ctx: Context) -> None:
    model = load_model(_require(ctx.out / "model" / "tree.txt", "train"))
    mappings = _read_mappings(_require(ctx.out / "model" / "mapping.csv", "train"))
    if model.n_features != len(FEATURE_NAMES):
        raise StageError(f"model expects {model.n_features} features, pipeline makes {len(FEATURE_NAMES)}")
    for seg in ctx.segments():
        if seg.name not in mappings:
            raise StageError(f"no indicator mapping for {seg.name} in model/mapping.csv; "
                             f"re-run `train` including this segment")
        hl = _head_losses(ctx, [seg])[seg.name]
        feats = rolling_features(hl.short_term)
        y_hat = model.predict(feats.values) if len(feats) else np.empty(0)
        ind = build_pig_indicator(hl.long_term, mappings[seg.name], seg).y
        k = (feats.t_us - ind.start_us) // ind.step_us
        observed = ind.values[k] if len(feats) else np.empty(0)
        sel = np.ones(len(feats), dtype=bool)
        if ctx.t_from is not None:
            sel &= feats.t_us >= ctx.t_from
        if ctx.t_to is not None:
            sel &= feats.t_us < ctx.t_to
        if not sel.any():
            raise StageError(f"{seg.name}: no feature rows in the requested time range")
        write_line_chart(ctx.out / "predict" / f"{seg.name}.svg", feats.t_us[sel],
                         {"predicted": y_hat[sel], "indicator": observed[sel]},
                         title=f"PIG indicator {seg.name}", ylabel="probability")
        ctx.say(f"predict {seg.name}: {int(sel.sum())} rows, latest {y_hat[sel][-1]:.4f} "
                f"at {iso(int(feats.t_us[sel][-1]))}")


def latest_prediction(path: Path, before_us: int | None = None) -> tuple[int, float] | None:
    """Last non-MISSING predicted value (strictly before ``before_us`` when given)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != "time_us," + ",".join(PREDICT_COLUMNS):
        raise StageError(f"{path}: unexpected header {header!r}")
    frame = pd.read_csv(path, float_precision="round_trip",
                        dtype={"time_us": np.int64, "predicted": np.float64, "indicator": np.float64})
    t = frame["time_us"].to_numpy(dtype=np.int64)
    p = frame["predicted"].to_numpy(dtype=np.float64)
    ok = ~np.isnan(p)
    if before_us is not None:
        ok &= t < before_us
    if not ok.any():
        return None
    i = int(np.flatnonzero(ok)[-1])
    return int(t[i]), float(p[i])


def rank_segments(latest: dict[str, tuple[int, float] | None]) -> list[tuple[str, int | None, float]]:
    """Highest latest probability first; ties and missing values resolved by segment name."""
    rows = [(name, None if v is None else v[0], math.nan if v is None else v[1])
            for name, v in latest.items()]
    return sorted(rows, key=lambda r: (math.isnan(r[2]), -r[2] if not math.isnan(r[2]) else 0.0, r[0]))


def cmd_report(ctx: Context) -> None:
    threshold = ctx.cfg.threshold if ctx.args.threshold is None else ctx.args.threshold
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("--threshold must lie in [0, 1]")
    latest = {}
    for seg in ctx.segments():
        path = _require(ctx.out / "predict" / f"{seg.name}.csv", "predict")
        latest[seg.name] = latest_prediction(path, ctx.t_to)
    ranked = rank_segments(latest)
    flagged = [not math.isnan(p) and p > threshold for _, _, p in ranked]
    write_bar_chart(ctx.out / "report" / "report.svg", [r[0] for r in ranked], [r[2] for r in ranked],
                    title=f"Latest PIG probability per segment (threshold {threshold:g})",
                    ylabel="probability", threshold=threshold,
                    extra={"rank": list(range(1, len(ranked) + 1)),
                           "time": [iso(t) if t is not None else "" for _, t, _ in ranked],
                           "flagged": ["yes" if f else "no" for f in flagged]})
    for i, ((name, t, p), f) in enumerate(zip(ranked, flagged), start=1):
        when = iso(t) if t is not None else "no data"
        ctx.say(f"{i}. {name} {fmt(round(p, 4)) or 'n/a'} at {when}{'  FLAGGED' if f else ''}")
    ctx.say(f"report: {sum(flagged)} of {len(ranked)} segments above threshold {threshold:g}")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic scenario with ground truth"),
    "cleanse": (cmd_cleanse, "remove outliers, resample and label operating regimes"),
    "headloss": (cmd_headloss, "compensated head loss per segment over transport intervals"),
    "track": (cmd_track, "correlation map and PIG trajectory for one segment"),
    "train": (cmd_train, "build features and indicator, train and evaluate the tree"),
    "predict": (cmd_predict, "predicted PIG indicator per segment"),
    "report": (cmd_report, "rank segments by latest PIG probability"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pigwatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="INI-style run configuration")
        p.add_argument("--out", help="working directory for inputs and artifacts")
        p.add_argument("--from", dest="from_", metavar="ISO8601", help="start of the time range (UTC)")
        p.add_argument("--to", metavar="ISO8601", help="end of the time range (UTC, exclusive)")
        p.add_argument("--segment", metavar="UP-DOWN", help="restrict to one segment")
        if name == "synth":
            p.add_argument("--seed", type=int, help="scenario seed")
        if name == "report":
            p.add_argument("--threshold", type=float, metavar="0..1", help="flagging threshold")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for attr in ("seed", "threshold"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        cfg = load_config(args.config)
        ctx = Context(cfg, args)
    except (ConfigError, ValueError) as exc:
        print(f"pigwatch {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command][0](ctx)
    except ConfigError as exc:
        print(f"pigwatch {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (StageError, CleanseError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pigwatch {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
