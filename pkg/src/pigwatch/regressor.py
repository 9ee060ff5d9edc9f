"""From-scratch CART regression tree plus the RMS-error / accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FEATURE_NAMES, Dataset
from .series import atomic_write_text, iso, to_us

SPLIT_RULE = "x[feature] <= threshold goes left"
FORMAT_TAG = "pigwatch-cart 1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int | None = 8
    min_samples_leaf: int = 50
    min_mse_decrease: float = 1e-7

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


INTERPOLATING = TrainConfig(max_depth=None, min_samples_leaf=1, min_mse_decrease=0.0)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    child_sse: float        # summed squared error of both children about their means
    n_left: int


def _tie_tol(scale: float) -> float:
    return 1e-12 * (1.0 + abs(scale))


def best_split(X: np.ndarray, y: np.ndarray, min_leaf: int = 1) -> Split | None:
    """Greedy split minimising the children's summed squared error.

    Candidates are midpoints between consecutive distinct sorted values with at
    least ``min_leaf`` rows on each side. Near-ties (within 1e-12 relative)
    go to the lowest feature index, then the lowest threshold.
    """
    m, n_feat = X.shape
    if m < 2 * min_leaf:
        return None
    yc = y - y.mean()
    tot, tot2 = yc.sum(), float(yc @ yc)
    tol = _tie_tol(tot2)
    best: Split | None = None
    for j in range(n_feat):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = yc[order]
        cs = np.cumsum(ys)
        cs2 = np.cumsum(ys * ys)
        i = np.arange(min_leaf, m - min_leaf + 1)
        i = i[xs[i - 1] < xs[np.minimum(i, m - 1)]] if i.size else i
        if i.size == 0:
            continue
        left_sum, left_sq = cs[i - 1], cs2[i - 1]
        sse = (left_sq - left_sum ** 2 / i) + ((tot2 - left_sq) - (tot - left_sum) ** 2 / (m - i))
        sse = np.maximum(sse, 0.0)
        lo = sse.min()
        k = int(np.flatnonzero(sse <= lo + tol)[0])
        if best is None or sse[k] < best.child_sse - tol:
            a, b = xs[i[k] - 1], xs[i[k]]
            thr = a + (b - a) / 2.0
            if not a <= thr < b:
                thr = a
            best = Split(j, float(thr), float(sse[k]), int(i[k]))
    return best


@dataclass(frozen=True)
class DecisionTreeModel:
    """Flat preorder arrays; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int
    feature_names: tuple[str, ...] = field(default=FEATURE_NAMES)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ModelError(f"expected {self.n_features} features per row, got shape {X.shape}")
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        rows = np.arange(X.shape[0])
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active[r] = self.feature[node[r]] >= 0
        return self.value[node]

    def dumps(self) -> str:
        lines = [f"# {FORMAT_TAG}", f"# split: {SPLIT_RULE}",
                 f"# features: {','.join(self.feature_names)}"]
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                lines.append(f"node {i} leaf {float(self.value[i])!r}")
            else:
                lines.append(f"node {i} split {int(self.feature[i])} {float(self.threshold[i])!r} "
                             f"{int(self.left[i])} {int(self.right[i])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DecisionTreeModel":
        meta: dict[str, str] = {}
        nodes: dict[int, tuple] = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(":")
                meta[key.strip()] = val.strip()
                continue
            parts = line.split()
            try:
                if parts[0] != "node":
                    raise ValueError
                nid = int(parts[1])
                if parts[2] == "leaf" and len(parts) == 4:
                    nodes[nid] = (-1, 0.0, -1, -1, float(parts[3]))
                elif parts[2] == "split" and len(parts) == 7:
                    nodes[nid] = (int(parts[3]), float(parts[4]), int(parts[5]), int(parts[6]), 0.0)
                else:
                    raise ValueError
            except (ValueError, IndexError):
                raise ModelError(f"model line {line_no}: cannot parse {raw!r}") from None
        if meta.get("split") != SPLIT_RULE:
            raise ModelError("model file lacks the '<=' goes-left split declaration")
        if sorted(nodes) != list(range(len(nodes))) or not nodes:
            raise ModelError("model node ids must be 0..n-1")
        names = tuple(meta.get("features", ",".join(FEATURE_NAMES)).split(","))
        arr = np.array([nodes[i] for i in range(len(nodes))], dtype=object)
        return cls(np.array(arr[:, 0], dtype=np.int64), np.array(arr[:, 1], dtype=np.float64),
                   np.array(arr[:, 2], dtype=np.int64), np.array(arr[:, 3], dtype=np.int64),
                   np.array(arr[:, 4], dtype=np.float64), len(names), names)


def fit_tree(X: np.ndarray, y: np.ndarray, cfg: TrainConfig = TrainConfig(),
             feature_names: Sequence[str] | None = None) -> DecisionTreeModel:
    """Grow a regression tree greedily (depth-first, nodes numbered in preorder)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ModelError("cannot fit a tree on an empty dataset")
    if y.shape != (X.shape[0],):
        raise ModelError("target length must match the row count")
    names = tuple(feature_names) if feature_names is not None else (
        FEATURE_NAMES if X.shape[1] == len(FEATURE_NAMES) else tuple(f"x{i}" for i in range(X.shape[1])))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        for lst, fill in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(fill)
        return len(feature) - 1

    # ids are handed out when a node is popped; pushing right before left
    # yields preorder numbering
    stack = [(-1, False, np.arange(X.shape[0]), 0)]
    while stack:
        parent, is_right, idx, depth = stack.pop()
        nid = new_node()
        if parent >= 0:
            (right if is_right else left)[parent] = nid
        yn = y[idx]
        lo_y, hi_y = float(yn.min()), float(yn.max())
        # a float mean can land an ulp outside its inputs
        value[nid] = min(max(float(yn.mean()), lo_y), hi_y)
        m = idx.size
        parent_sse = float(np.sum((yn - yn.mean()) ** 2))
        if (cfg.max_depth is not None and depth >= cfg.max_depth) or lo_y == hi_y:
            continue
        split = best_split(X[idx], yn, cfg.min_samples_leaf)
        if split is None:
            continue
        decrease = (parent_sse - split.child_sse) / m
        assert decrease >= -_tie_tol(parent_sse) / m, "split increased training MSE"
        if decrease < cfg.min_mse_decrease:
            continue
        go_left = X[idx, split.feature] <= split.threshold
        feature[nid], threshold[nid], value[nid] = split.feature, split.threshold, 0.0
        stack.append((nid, True, idx[~go_left], depth + 1))
        stack.append((nid, False, idx[go_left], depth + 1))
    return DecisionTreeModel(np.array(feature, dtype=np.int64), np.array(threshold),
                             np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                             np.array(value), X.shape[1], names)


def predict(model: DecisionTreeModel, X: np.ndarray) -> np.ndarray:
    return model.predict(X)


def save_model(path, model: DecisionTreeModel) -> None:
    atomic_write_text(path, model.dumps())


def load_model(path) -> DecisionTreeModel:
    with open(path, encoding="utf-8") as fh:
        return DecisionTreeModel.loads(fh.read())


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    rms_error: float
    accuracy_pct: float
    n_rows: int
    segment: str = ""
    span: tuple[int, int] | None = None

    def line(self) -> str:
        span = "" if self.span is None else f" {iso(self.span[0])}..{iso(self.span[1])}"
        return (f"{self.segment or '-'}: rms={self.rms_error:.4f} "
                f"accuracy={self.accuracy_pct:.2f}% rows={self.n_rows}{span}")


def accuracy_from_rms(rms: float) -> float:
    return 100.0 * (1.0 - rms)


def evaluate(y_hat: Sequence[float], y: Sequence[float], segment: str = "",
             span: tuple[int, int] | None = None) -> EvalReport:
    """RMS of the error ``y_hat - y`` and the matching percentage accuracy."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ModelError(f"length mismatch: {y_hat.size} predictions vs {y.size} targets")
    if y.size == 0:
        raise ModelError("cannot evaluate an empty prediction set")
    err = y_hat - y
    rms = math.sqrt(float(np.mean(err * err)))
    return EvalReport(rms, accuracy_from_rms(rms), int(y.size), segment, span)


@dataclass(frozen=True)
class ProtocolSpans:
    train_segment: str = "A-C"
    train_from: int = field(default_factory=lambda: to_us("2013-06-01"))
    train_to: int = field(default_factory=lambda: to_us("2014-06-01"))
    test_from: int = field(default_factory=lambda: to_us("2014-06-01"))
    test_to: int = field(default_factory=lambda: to_us("2014-12-01"))
    full_from: int = field(default_factory=lambda: to_us("2013-06-01"))
    full_to: int = field(default_factory=lambda: to_us("2014-12-01"))


def run_protocol(datasets: Mapping[str, Dataset], cfg: TrainConfig = TrainConfig(),
                 spans: ProtocolSpans = ProtocolSpans(),
                 other_segments: Sequence[str] | None = None
                 ) -> tuple[DecisionTreeModel, list[EvalReport]]:
    """Train on the training segment's early span; test on its later span and on
    every other segment over the full span."""
    if spans.train_segment not in datasets:
        raise ModelError(f"missing dataset for training segment {spans.train_segment}")
    others = sorted(k for k in datasets if k != spans.train_segment) \
        if other_segments is None else list(other_segments)
    for name in others:
        if name not in datasets:
            raise ModelError(f"missing dataset for segment {name}")
    base = datasets[spans.train_segment]
    train = base.slice(spans.train_from, spans.train_to)
    if len(train) == 0:
        raise ModelError(f"segment {spans.train_segment}: no rows in the training span")
    model = fit_tree(train.X, train.y, cfg)
    jobs = [(spans.train_segment, base, spans.test_from, spans.test_to)]
    jobs += [(name, datasets[name], spans.full_from, spans.full_to) for name in others]
    reports = []
    for name, ds, lo, hi in jobs:
        part = ds.slice(lo, hi)
        if len(part) == 0:
            raise ModelError(f"segment {name}: no rows in the test span")
        reports.append(evaluate(model.predict(part.X), part.y, name, (lo, hi)))
    return model, reports
