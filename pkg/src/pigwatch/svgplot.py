"""Deterministic SVG charts; every chart is written next to a CSV of its data."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .series import US_PER_S, atomic_write_text, fmt

WIDTH, HEIGHT = 800, 360
MARGIN = dict(left=70, right=130, top=36, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not hi > lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


def _range(values: np.ndarray) -> tuple[float, float]:
    v = values[np.isfinite(values)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    """Maps data coordinates into the plot area and emits the axes."""

    def __init__(self, xr, yr, title, xlabel, ylabel):
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]
        self.xlabel, self.ylabel = xlabel, ylabel

    def px(self, x):
        span = (self.x1 - self.x0) or 1.0
        return self.left + (np.asarray(x, float) - self.x0) / span * (self.right - self.left)

    def py(self, y):
        span = (self.y1 - self.y0) or 1.0
        return self.bottom - (np.asarray(y, float) - self.y0) / span * (self.bottom - self.top)

    def axes(self) -> None:
        p = self.parts
        p.append(f'<rect x="{self.left}" y="{self.top}" width="{self.right - self.left}" '
                 f'height="{self.bottom - self.top}" fill="none" stroke="black"/>')
        for t in _ticks(self.x0, self.x1):
            x = _num(float(self.px(t)))
            p.append(f'<line x1="{x}" y1="{self.bottom}" x2="{x}" y2="{self.bottom + 4}" stroke="black"/>')
            p.append(f'<text x="{x}" y="{self.bottom + 16}" text-anchor="middle">{t:g}</text>')
        for t in _ticks(self.y0, self.y1):
            y = _num(float(self.py(t)))
            p.append(f'<line x1="{self.left - 4}" y1="{y}" x2="{self.left}" y2="{y}" stroke="black"/>')
            p.append(f'<text x="{self.left - 6}" y="{y}" text-anchor="end" dy="4">{t:.4g}</text>')
        p.append(f'<text x="{(self.left + self.right) / 2:.0f}" y="{HEIGHT - 10}" '
                 f'text-anchor="middle">{escape(self.xlabel)}</text>')
        cy = (self.top + self.bottom) / 2
        p.append(f'<text x="16" y="{cy:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {cy:.0f})">{escape(self.ylabel)}</text>')

    def polyline(self, x, y, color: str, width: float = 1.0) -> None:
        # NaN breaks the line into separate runs
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        edges = np.flatnonzero(np.diff(np.concatenate(([0], ok.astype(np.int8), [0]))))
        for a, b in zip(edges[::2], edges[1::2]):
            pts = " ".join(f"{_num(px)},{_num(py)}" for px, py in zip(self.px(x[a:b]), self.py(y[a:b])))
            self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                              f'stroke-width="{width}"/>')

    def legend(self, names: Sequence[str]) -> None:
        for i, name in enumerate(names):
            y = self.top + 14 * i + 6
            c = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<line x1="{self.right + 10}" y1="{y}" x2="{self.right + 28}" '
                              f'y2="{y}" stroke="{c}" stroke-width="2"/>')
            self.parts.append(f'<text x="{self.right + 32}" y="{y + 4}">{escape(name)}</text>')

    def text(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def sibling_csv(svg_path) -> Path:
    return Path(svg_path).with_suffix(".csv")


def _days(t_us: np.ndarray, origin_us: int) -> np.ndarray:
    return (np.asarray(t_us, dtype=np.int64) - origin_us) / (86400.0 * US_PER_S)


def write_line_chart(svg_path, t_us: np.ndarray, columns: Mapping[str, np.ndarray], *,
                     title: str, ylabel: str, csv_header_time: str = "time_us") -> None:
    """Time-series chart (x in days from the first sample) plus a sibling CSV."""
    t_us = np.asarray(t_us, dtype=np.int64)
    names = list(columns)
    lines = [",".join([csv_header_time] + names)]
    cols = [np.asarray(columns[n], dtype=np.float64) for n in names]
    for i, t in enumerate(t_us):
        lines.append(f"{int(t)}," + ",".join(fmt(c[i]) for c in cols))
    atomic_write_text(sibling_csv(svg_path), "\n".join(lines) + "\n")

    origin = int(t_us[0]) if t_us.size else 0
    x = _days(t_us, origin)
    yr = _range(np.concatenate(cols) if cols else np.empty(0))
    xr = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    frame = _Frame(xr, yr, title, "days", ylabel)
    frame.axes()
    for i, c in enumerate(cols):
        frame.polyline(_decimate(x), _decimate(c), PALETTE[i % len(PALETTE)])
    frame.legend(names)
    atomic_write_text(svg_path, frame.text())


def _decimate(v: np.ndarray, max_points: int = 4000) -> np.ndarray:
    # keep every k-th point so large series stay a few hundred kB
    k = max(1, int(math.ceil(v.size / max_points)))
    return v[::k]


def _block_mean(a: np.ndarray, rows: int, cols: int) -> np.ndarray:
    r = np.array_split(np.arange(a.shape[0]), rows)
    c = np.array_split(np.arange(a.shape[1]), cols)
    return np.array([[a[np.ix_(ri, ci)].mean() for ci in c] for ri in r])


def _heat_color(v: float) -> str:
    # white at 0 to dark red at 1
    v = max(0.0, min(1.0, v))
    r = int(round(255 - 105 * v))
    g = int(round(255 * (1 - v)))
    return f"#{r:02x}{g:02x}{g:02x}"


def write_heatmap(svg_path, t_us: np.ndarray, lags_s: np.ndarray, values: np.ndarray, *,
                  title: str, overlay: tuple[np.ndarray, np.ndarray] | None = None,
                  max_cells: tuple[int, int] = (240, 120)) -> None:
    """Time x lag heat map with an optional (time, lag) overlay; full data goes to the CSV."""
    t_us = np.asarray(t_us, dtype=np.int64)
    lines = ["time_us," + ",".join(fmt(l) for l in lags_s)]
    for t, row in zip(t_us, values):
        lines.append(f"{int(t)}," + ",".join(fmt(v) for v in row))
    atomic_write_text(sibling_csv(svg_path), "\n".join(lines) + "\n")

    origin = int(t_us[0]) if t_us.size else 0
    hours = (t_us - origin) / (3600.0 * US_PER_S)
    xr = (float(hours.min()), float(hours.max())) if hours.size > 1 else (0.0, 1.0)
    yr = (float(lags_s[0]), float(lags_s[-1]))
    frame = _Frame(xr, yr, title, "hours", "lag (s)")
    if values.size:
        nr = min(max_cells[0], values.shape[0])
        nc = min(max_cells[1], values.shape[1])
        blocks = _block_mean(values, nr, nc)
        cw = (frame.right - frame.left) / nr
        ch = (frame.bottom - frame.top) / nc
        for i in range(nr):
            for j in range(nc):
                v = float(blocks[i, j])
                if v <= 0.02:
                    continue
                frame.parts.append(
                    f'<rect x="{_num(frame.left + i * cw)}" y="{_num(frame.bottom - (j + 1) * ch)}" '
                    f'width="{_num(cw + 0.05)}" height="{_num(ch + 0.05)}" fill="{_heat_color(v)}"/>')
    frame.axes()
    if overlay is not None and len(overlay[0]):
        ox = (np.asarray(overlay[0], dtype=np.int64) - origin) / (3600.0 * US_PER_S)
        frame.polyline(ox, overlay[1], "#000000", 1.5)
    atomic_write_text(svg_path, frame.text())


def write_bar_chart(svg_path, labels: Sequence[str], values: Sequence[float], *, title: str,
                    ylabel: str, threshold: float | None = None,
                    extra: Mapping[str, Sequence] | None = None) -> None:
    """Vertical bars in the given order; ``extra`` columns are carried into the CSV only."""
    extra = dict(extra or {})
    lines = [",".join(["label", "value"] + list(extra))]
    for i, (lab, v) in enumerate(zip(labels, values)):
        lines.append(",".join([lab, fmt(float(v))] + [str(extra[k][i]) for k in extra]))
    atomic_write_text(sibling_csv(svg_path), "\n".join(lines) + "\n")

    n = len(labels)
    frame = _Frame((0.0, float(max(n, 1))), (0.0, 1.0), title, "segment", ylabel)
    slot = (frame.right - frame.left) / max(n, 1)
    for i, (lab, v) in enumerate(zip(labels, values)):
        v = float(v)
        top = float(frame.py(min(max(v, 0.0), 1.0))) if math.isfinite(v) else frame.bottom
        over = threshold is not None and math.isfinite(v) and v > threshold
        color = PALETTE[1] if over else PALETTE[0]
        x = frame.left + slot * (i + 0.2)
        frame.parts.append(f'<rect x="{_num(x)}" y="{_num(top)}" width="{_num(slot * 0.6)}" '
                           f'height="{_num(frame.bottom - top)}" fill="{color}"/>')
        frame.parts.append(f'<text x="{_num(x + slot * 0.3)}" y="{frame.bottom + 30}" '
                           f'text-anchor="middle">{escape(lab)}</text>')
    frame.parts.append(f'<rect x="{frame.left}" y="{frame.top}" width="{frame.right - frame.left}" '
                       f'height="{frame.bottom - frame.top}" fill="none" stroke="black"/>')
    for t in _ticks(0.0, 1.0):
        y = _num(float(frame.py(t)))
        frame.parts.append(f'<text x="{frame.left - 6}" y="{y}" text-anchor="end" dy="4">{t:g}</text>')
    if threshold is not None:
        y = _num(float(frame.py(threshold)))
        frame.parts.append(f'<line x1="{frame.left}" y1="{y}" x2="{frame.right}" y2="{y}" '
                           f'stroke="black" stroke-dasharray="4 3"/>')
    atomic_write_text(svg_path, frame.text())
