"""Run configuration: one INI-style ``key = value`` file with sections.

Every section is optional; anything omitted keeps its default. Example::

    [stations]
    # id = chainage_km, altitude_m
    A = 0.0, 179
    B = 59.307, 359
    C = 100.486, 558

    [protocol]
    train_segment = A-C
    train_from = 2013-06-01
    train_to = 2014-06-01

    [report]
    threshold = 0.8
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .cleanse import OutlierPolicy
from .hydraulics import WEEK_S, FluidProps
from .pigtrack import TrackerConfig
from .regressor import ProtocolSpans, TrainConfig
from .series import SegmentMeta, StationMeta, all_segments, to_us, validate_stations
from .synth import DEFAULT_STATIONS, ScenarioConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    stations: tuple[StationMeta, ...] = DEFAULT_STATIONS
    fluid: FluidProps = FluidProps()
    policy: OutlierPolicy = OutlierPolicy()
    grid_step_s: float = 60.0
    state_window_s: float = 600.0
    moving_average_s: float = WEEK_S
    tracker: TrackerConfig = TrackerConfig()
    track_segment: str = "A-B"
    lo_percentile: float = 1.0
    hi_percentile: float = 99.0
    training: TrainConfig = TrainConfig()
    spans: ProtocolSpans = ProtocolSpans()
    threshold: float = 0.5
    input_dir: Path | None = None
    output_dir: Path = Path(".")
    synth: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        validate_stations(self.stations)
        names = {s.name for s in self.segments}
        if self.track_segment not in names:
            raise ConfigError(f"track segment {self.track_segment} is not a segment of the stations")
        if self.spans.train_segment not in names:
            raise ConfigError(f"train segment {self.spans.train_segment} is not a segment of the stations")
        sp = self.spans
        for lo, hi, what in ((sp.train_from, sp.train_to, "train"), (sp.test_from, sp.test_to, "test"),
                             (sp.full_from, sp.full_to, "full")):
            if not lo < hi:
                raise ConfigError(f"{what} date range is not well ordered")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")

    @property
    def segments(self) -> list[SegmentMeta]:
        return all_segments(self.stations)

    def segment(self, name: str) -> SegmentMeta:
        for s in self.segments:
            if s.name == name:
                return s
        raise ConfigError(f"unknown segment {name!r}; known: {', '.join(s.name for s in self.segments)}")

    @property
    def inputs(self) -> Path:
        return self.output_dir if self.input_dir is None else self.input_dir

    def scenario(self, seed: int | None = None) -> ScenarioConfig:
        changes = dict(self.synth)
        changes["stations"] = self.stations
        changes["density"] = self.fluid.density_kg_m3
        changes["gravity"] = self.fluid.gravity_m_s2
        changes["sound_speed_m_s"] = self.tracker.sound_speed_m_s
        if seed is not None:
            changes["seed"] = seed
        try:
            return ScenarioConfig(**changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth: {exc}") from None


def _float(sec, key):
    try:
        return float(sec[key])
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: not a number: {sec[key]!r}") from None


def _coerce(sec, key, default):
    raw = sec[key].strip()
    if isinstance(default, bool):
        return sec.getboolean(key)
    if isinstance(default, int) or (default is None and raw.lower() != "none"):
        if raw.lower() == "none":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{sec.name}] {key}: not an integer: {raw!r}") from None
    if default is None:
        return None
    if isinstance(default, float):
        return _float(sec, key)
    return raw


def _override(obj, sec, renames: dict[str, str] | None = None):
    """Replace dataclass fields named by the section's keys, coercing to the default's type."""
    renames = renames or {}
    fields = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key in sec:
        name = renames.get(key, key)
        if name not in fields:
            raise ConfigError(f"[{sec.name}] unknown key {key!r}")
        changes[name] = _coerce(sec, key, getattr(obj, name))
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None


def _check_keys(sec, allowed):
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"[{sec.name}] unknown key {key!r}")


def _stations(sec) -> tuple[StationMeta, ...]:
    out = []
    for sid in sec:
        parts = [p.strip() for p in sec[sid].split(",")]
        if len(parts) != 2:
            raise ConfigError(f"[stations] {sid}: expected 'chainage_km, altitude_m'")
        try:
            out.append(StationMeta(sid, float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"[stations] {sid}: {exc}") from None
    if len(out) < 2:
        raise ConfigError("[stations] needs at least two stations")
    return tuple(sorted(out, key=lambda s: s.chainage_km))


def _dates(sec, spans: ProtocolSpans) -> ProtocolSpans:
    changes = {}
    for key in sec:
        if key == "train_segment":
            changes[key] = sec[key].strip()
        elif key in {f.name for f in dataclasses.fields(ProtocolSpans)}:
            try:
                changes[key] = to_us(sec[key].strip())
            except ValueError as exc:
                raise ConfigError(f"[protocol] {key}: {exc}") from None
        else:
            raise ConfigError(f"[protocol] unknown key {key!r}")
    return dataclasses.replace(spans, **changes)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Parse a run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # station ids are case-sensitive
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".splitlines()[0]) from None

    known = {"stations", "fluid", "cleanse", "hydraulics", "tracker", "mapping", "training",
             "protocol", "report", "paths", "synth"}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    kw: dict[str, Any] = {}
    if parser.has_section("stations"):
        kw["stations"] = _stations(parser["stations"])
    if parser.has_section("fluid"):
        kw["fluid"] = _override(FluidProps(), parser["fluid"],
                                {"density": "density_kg_m3", "gravity": "gravity_m_s2"})
    if parser.has_section("cleanse"):
        sec = parser["cleanse"]
        grid = {k: sec[k] for k in ("grid_step_s", "state_window_s") if k in sec}
        for k in grid:
            kw[k] = _float(sec, k)
        pol = configparser.ConfigParser()
        pol.optionxform = str
        pol.read_dict({"cleanse": {k: v for k, v in sec.items() if k not in grid}})
        kw["policy"] = _override(OutlierPolicy(), pol["cleanse"])
    if parser.has_section("hydraulics"):
        sec = parser["hydraulics"]
        _check_keys(sec, {"moving_average_days"})
        if "moving_average_days" in sec:
            kw["moving_average_s"] = _float(sec, "moving_average_days") * 86400.0
    if parser.has_section("tracker"):
        sec = parser["tracker"]
        if "segment" in sec:
            kw["track_segment"] = sec["segment"].strip()
        sub = configparser.ConfigParser()
        sub.optionxform = str
        sub.read_dict({"tracker": {k: v for k, v in sec.items() if k != "segment"}})
        kw["tracker"] = _override(TrackerConfig(), sub["tracker"])
    if parser.has_section("mapping"):
        sec = parser["mapping"]
        _check_keys(sec, {"lo_percentile", "hi_percentile"})
        for k in sec:
            kw[k] = _float(sec, k)
    if parser.has_section("training"):
        kw["training"] = _override(TrainConfig(), parser["training"])
    if parser.has_section("protocol"):
        kw["spans"] = _dates(parser["protocol"], ProtocolSpans())
    if parser.has_section("report"):
        sec = parser["report"]
        _check_keys(sec, {"threshold"})
        if "threshold" in sec:
            kw["threshold"] = _float(sec, "threshold")
    if parser.has_section("paths"):
        sec = parser["paths"]
        _check_keys(sec, {"input", "output"})
        base = Path(path).parent
        if "input" in sec:
            kw["input_dir"] = base / sec["input"].strip()
        if "output" in sec:
            kw["output_dir"] = base / sec["output"].strip()
    if parser.has_section("synth"):
        sec = parser["synth"]
        defaults = ScenarioConfig()
        scalar = {f.name for f in dataclasses.fields(ScenarioConfig)
                  if isinstance(getattr(defaults, f.name), (int, float)) and f.name != "seed"} | {"seed"}
        _check_keys(sec, scalar)
        kw["synth"] = {k: _coerce(sec, k, getattr(defaults, k)) for k in sec}
    try:
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
