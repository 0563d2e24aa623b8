"""Leaf-budgeted CART regression trees grown best-first on binned features."""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from twice.errors import AllWeightsZero, EmptyInput, SchemaMismatch, ValidationError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeFitConfig:
    max_leaves: int = 31
    min_leaf_size: float = 30
    max_depth: int = 15
    numeric_candidate_quantiles: int = 255
    seed: int = 0

    def __post_init__(self):
        if self.max_leaves < 1:
            raise ValidationError("max_leaves must be >= 1")
        if self.min_leaf_size < 1:
            raise ValidationError("min_leaf_size must be >= 1")
        if self.max_depth < 0:
            raise ValidationError("max_depth must be >= 0")
        if self.numeric_candidate_quantiles < 1:
            raise ValidationError("numeric_candidate_quantiles must be >= 1")


def _weighted_candidates(x, w, n_quantiles):
    """Split thresholds for one numeric column: midpoints below each candidate value."""
    pos = w > 0
    x, w = x[pos], w[pos]
    u = np.unique(x)
    if len(u) < 2:
        return np.empty(0)
    if len(u) - 1 <= n_quantiles:
        idx = np.arange(1, len(u))
    else:
        order = np.argsort(x, kind="stable")
        cw = np.cumsum(w[order])
        levels = np.arange(1, n_quantiles + 1) / (n_quantiles + 1) * cw[-1]
        qv = x[order][np.minimum(np.searchsorted(cw, levels), len(x) - 1)]
        idx = np.unique(np.searchsorted(u, qv))
        idx = idx[idx > 0]
    thr = 0.5 * (u[idx - 1] + u[idx])
    return np.unique(thr)


class Binner:
    """Integer-coded view of a feature matrix, shared across many tree fits."""

    def __init__(self, X, categorical: Sequence[bool], weights=None, n_quantiles: int = 255):
        X = np.asarray(X, dtype=np.float64)
        n, p = X.shape
        self.categorical = np.asarray(categorical, dtype=bool)
        if len(self.categorical) != p:
            raise SchemaMismatch(f"{p} columns but {len(self.categorical)} feature kinds")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        self.thresholds: list[np.ndarray | None] = []
        self.nbins = np.zeros(p, dtype=np.int64)
        codes = np.empty((n, p), dtype=np.int32)
        for j in range(p):
            if self.categorical[j]:
                c = X[:, j].astype(np.int64)
                if n and c.min() < 0:
                    raise ValidationError(f"feature {j}: negative category code")
                codes[:, j] = c
                self.thresholds.append(None)
                self.nbins[j] = int(c.max()) + 1 if n else 1
            else:
                thr = _weighted_candidates(X[:, j], w, n_quantiles)
                codes[:, j] = np.searchsorted(thr, X[:, j], side="right")
                self.thresholds.append(thr)
                self.nbins[j] = len(thr) + 1
        self.width = int(self.nbins.max()) if p else 1
        self.codes = codes
        self.flat = codes + (np.arange(p, dtype=np.int32) * self.width)[None, :]
        self.n, self.p = n, p

    def histogram(self, rows, w, wy, unit_weights=False):
        size = self.p * self.width
        flat = self.flat[rows].ravel()
        if unit_weights:
            W = np.bincount(flat, minlength=size).astype(np.float64)
        else:
            W = np.bincount(flat, weights=np.repeat(w[rows], self.p), minlength=size)
        S = np.bincount(flat, weights=np.repeat(wy[rows], self.p), minlength=size)
        return W.reshape(self.p, self.width), S.reshape(self.p, self.width)


@dataclass
class _Split:
    gain: float
    feature: int
    bin: int = -1                      # numeric: rows with code <= bin go left
    left_levels: tuple = ()            # categorical
    right_levels: tuple = ()
    default_left: bool = True


def _best_split(W, S, binner: Binner, min_leaf, min_gain):
    Wt = W[0].sum()
    St = S[0].sum()
    parent = St * St / Wt
    best = [None] * binner.p
    gains = np.full(binner.p, -np.inf)
    num = np.flatnonzero(~binner.categorical)
    if len(num) and W.shape[1] > 1:
        cw = np.cumsum(W[num], axis=1)[:, :-1]
        cs = np.cumsum(S[num], axis=1)[:, :-1]
        rw = Wt - cw
        ok = (cw >= min_leaf) & (rw >= min_leaf) & (cw > 0) & (rw > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = cs * cs / cw + (St - cs) ** 2 / rw - parent
        g = np.where(ok, g, -np.inf)
        arg = np.argmax(g, axis=1)
        top = g[np.arange(len(num)), arg]
        for f, b, v in zip(num, arg, top):
            if v > min_gain:
                gains[f] = v
                best[f] = _Split(float(v), int(f), bin=int(b))
    for f in np.flatnonzero(binner.categorical):
        w_f, s_f = W[f], S[f]
        present = np.flatnonzero(w_f > 0)
        if len(present) < 2:
            continue
        means = s_f[present] / w_f[present]
        order = present[np.lexsort((present, means))]
        cw = np.cumsum(w_f[order])[:-1]
        cs = np.cumsum(s_f[order])[:-1]
        rw = Wt - cw
        ok = (cw >= min_leaf) & (rw >= min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = cs * cs / cw + (St - cs) ** 2 / rw - parent
        g = np.where(ok, g, -np.inf)
        m = int(np.argmax(g))
        if g[m] > min_gain:
            left = tuple(sorted(int(c) for c in order[:m + 1]))
            right = tuple(sorted(int(c) for c in order[m + 1:]))
            gains[f] = g[m]
            best[f] = _Split(float(g[m]), int(f), left_levels=left, right_levels=right,
                             default_left=bool(cw[m] >= rw[m]))
    if not np.isfinite(gains).any():
        return None
    return best[int(np.argmax(gains))]


class RegressionTree:
    """Fitted tree stored as flat node arrays; node 0 is the root."""

    def __init__(self, feature, threshold, left, right, value, weight, gain, default_left,
                 left_levels, right_levels, feature_names, categorical):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.gain = np.asarray(gain, dtype=np.float64)
        self.default_left = np.asarray(default_left, dtype=bool)
        self.left_levels = {int(k): tuple(v) for k, v in left_levels.items()}
        self.right_levels = {int(k): tuple(v) for k, v in right_levels.items()}
        self.feature_names = list(feature_names)
        self.categorical = np.asarray(categorical, dtype=bool)
        self._tables = {}
        for node, lev in self.left_levels.items():
            rlev = self.right_levels.get(node, ())
            size = max(lev + rlev) + 1
            table = np.full(size, 1 if self.default_left[node] else 0, dtype=np.int8)
            table[list(lev)] = 1
            table[list(rlev)] = 0
            self._tables[node] = table

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def leaf_count(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def leaves_in_order(self) -> list[int]:
        """Leaf node ids from left to right."""
        out, stack = [], [0]
        while stack:
            node = stack.pop()
            if self.feature[node] < 0:
                out.append(node)
            else:
                stack.append(int(self.right[node]))
                stack.append(int(self.left[node]))
        return out

    def _go_left(self, node, x):
        f = self.feature[node]
        if not self.categorical[f]:
            return x < self.threshold[node]
        table = self._tables[node]
        lev = x.astype(np.int64)
        known = (lev >= 0) & (lev < len(table)) & (lev == x)
        out = np.full(len(x), bool(self.default_left[node]))
        out[known] = table[lev[known]] == 1
        return out

    def apply(self, X) -> np.ndarray:
        """Leaf node id for every row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise SchemaMismatch(f"expected {self.n_features} columns, got shape {X.shape}")
        out = np.zeros(len(X), dtype=np.int64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            if self.feature[node] < 0 or len(idx) == 0:
                out[idx] = node
                continue
            go = self._go_left(node, X[idx, self.feature[node]])
            stack.append((int(self.left[node]), idx[go]))
            stack.append((int(self.right[node]), idx[~go]))
        return out

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def leaf_of(self, row) -> int:
        return int(self.apply(np.asarray(row, dtype=np.float64)[None, :])[0])

    def predict_row(self, row) -> float:
        return float(self.value[self.leaf_of(row)])

    def paths(self) -> dict[int, list[tuple[int, str, object]]]:
        """Root-to-leaf conditions per leaf: ``(feature, op, operand)`` with op in ``<``, ``>=``, ``in``."""
        out = {}
        stack = [(0, [])]
        while stack:
            node, conds = stack.pop()
            f = int(self.feature[node])
            if f < 0:
                out[node] = conds
                continue
            if self.categorical[f]:
                lc = (f, "in", self.left_levels[node])
                rc = (f, "in", self.right_levels[node])
            else:
                lc = (f, "<", float(self.threshold[node]))
                rc = (f, ">=", float(self.threshold[node]))
            stack.append((int(self.right[node]), conds + [rc]))
            stack.append((int(self.left[node]), conds + [lc]))
        return out

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            rec = {"id": i, "value": float(self.value[i]), "weight": float(self.weight[i])}
            if self.feature[i] >= 0:
                rec.update(feature=int(self.feature[i]), left=int(self.left[i]), right=int(self.right[i]),
                           gain=float(self.gain[i]), default_left=bool(self.default_left[i]))
                if self.categorical[self.feature[i]]:
                    rec.update(left_levels=list(self.left_levels[i]), right_levels=list(self.right_levels[i]))
                else:
                    rec["threshold"] = float(self.threshold[i])
            nodes.append(rec)
        return {"format": "twice-tree", "version": FORMAT_VERSION, "feature_names": self.feature_names,
                "categorical": self.categorical.tolist(), "nodes": nodes}

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionTree":
        if data.get("format") != "twice-tree" or data.get("version") != FORMAT_VERSION:
            raise ValidationError("not a version-1 tree document")
        nodes = data["nodes"]
        m = len(nodes)
        feature = np.full(m, -1)
        threshold = np.full(m, np.nan)
        left = np.full(m, -1)
        right = np.full(m, -1)
        gain = np.zeros(m)
        default_left = np.zeros(m, dtype=bool)
        ll, rl = {}, {}
        for rec in nodes:
            i = rec["id"]
            if "feature" in rec:
                feature[i], left[i], right[i] = rec["feature"], rec["left"], rec["right"]
                gain[i], default_left[i] = rec["gain"], rec["default_left"]
                if "threshold" in rec:
                    threshold[i] = rec["threshold"]
                else:
                    ll[i], rl[i] = rec["left_levels"], rec["right_levels"]
        return cls(feature, threshold, left, right, [r["value"] for r in nodes], [r["weight"] for r in nodes],
                   gain, default_left, ll, rl, data["feature_names"], data["categorical"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RegressionTree":
        return cls.from_dict(json.loads(text))


def grow(binner: Binner, y, w, config: TreeFitConfig, feature_names=None, rows=None):
    """Grow one tree on pre-binned data. Returns ``(tree, leaf node id per training row)``."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if rows is None:
        rows = np.arange(binner.n)
    if len(rows) == 0:
        raise EmptyInput("no rows to fit")
    if np.any(w[rows] < 0):
        raise ValidationError("weights must be non-negative")
    total_w = w[rows].sum()
    if not total_w > 0:
        raise AllWeightsZero("weights sum to zero")
    center = (w[rows] * y[rows]).sum() / total_w
    yc = y - center
    wy = w * yc
    min_gain = 1e-12 * float((w[rows] * yc[rows] ** 2).sum())
    names = feature_names or [f"x{j}" for j in range(binner.p)]
    unit = bool(np.all(w[rows] == 1.0))

    feature, thr, left, right, gain, dleft, depth = [-1], [np.nan], [-1], [-1], [0.0], [False], [0]
    ll, rl = {}, {}
    members = {0: rows}
    hists = {0: binner.histogram(rows, w, wy, unit)}
    heap = []

    def consider(node):
        if depth[node] >= config.max_depth or config.max_leaves < 2:
            return
        W, S = hists[node]
        split = _best_split(W, S, binner, config.min_leaf_size, min_gain)
        if split is not None:
            heapq.heappush(heap, (-split.gain, node, split))

    consider(0)
    leaves = 1
    while heap and leaves < config.max_leaves:
        _, node, split = heapq.heappop(heap)
        idx = members.pop(node)
        f = split.feature
        if binner.categorical[f]:
            table = np.zeros(binner.nbins[f], dtype=bool)
            table[list(split.left_levels)] = True
            go = table[binner.codes[idx, f]]
            ll[node], rl[node] = split.left_levels, split.right_levels
            thr[node] = np.nan
        else:
            go = binner.codes[idx, f] <= split.bin
            thr[node] = float(binner.thresholds[f][split.bin])
        feature[node], gain[node], dleft[node] = f, split.gain, split.default_left
        if not binner.categorical[f]:
            wl = w[idx[go]].sum()
            dleft[node] = bool(wl >= w[idx].sum() - wl)
        kids = []
        for part in (idx[go], idx[~go]):
            c = len(feature)
            feature.append(-1); thr.append(np.nan); left.append(-1); right.append(-1)
            gain.append(0.0); dleft.append(False); depth.append(depth[node] + 1)
            members[c] = part
            kids.append(c)
        left[node], right[node] = kids
        small, large = sorted(kids, key=lambda c: (len(members[c]), c))
        pW, pS = hists.pop(node)
        hists[small] = binner.histogram(members[small], w, wy, unit)
        hists[large] = (pW - hists[small][0], pS - hists[small][1])
        leaves += 1
        consider(kids[0])
        consider(kids[1])

    m = len(feature)
    leaf_of_row = np.empty(binner.n, dtype=np.int64)
    for node, idx in members.items():
        leaf_of_row[idx] = node
    # node statistics from raw targets: every node's rows are the union of its leaves' rows
    wsum = np.zeros(m)
    ysum = np.zeros(m)
    for node, idx in members.items():
        wsum[node] = w[idx].sum()
        ysum[node] = (w[idx] * y[idx]).sum()
    for node in range(m - 1, -1, -1):
        if feature[node] >= 0:
            wsum[node] = wsum[left[node]] + wsum[right[node]]
            ysum[node] = ysum[left[node]] + ysum[right[node]]
    value = np.divide(ysum, wsum, out=np.full(m, center), where=wsum > 0)
    tree = RegressionTree(feature, thr, left, right, value, wsum, gain, dleft, ll, rl, names,
                          binner.categorical)
    return tree, leaf_of_row


def fit_tree(rows, targets, weights=None, config: TreeFitConfig = TreeFitConfig(),
             categorical: Sequence[bool] | None = None, feature_names=None) -> RegressionTree:
    """Fit a regression tree with at most ``config.max_leaves`` leaves.

    Growth is best-first: the frontier leaf with the largest weighted SSE
    reduction is split next, until the leaf budget, the depth limit or the
    absence of an admissible split stops it.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInput("rows must be a non-empty 2-D matrix")
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(y) != len(X) or len(w) != len(X):
        raise ValidationError("rows, targets and weights must have equal length")
    if np.any(w < 0):
        raise ValidationError("weights must be non-negative")
    if not w.sum() > 0:
        raise AllWeightsZero("weights sum to zero")
    cat = np.zeros(X.shape[1], dtype=bool) if categorical is None else categorical
    binner = Binner(X, cat, w, config.numeric_candidate_quantiles)
    tree, _ = grow(binner, y, w, config, feature_names)
    return tree


def predict(tree: RegressionTree, row) -> float:
    return tree.predict_row(row)


def leaf_of(tree: RegressionTree, row) -> int:
    return tree.leaf_of(row)


def config_dict(config: TreeFitConfig) -> dict:
    return asdict(config)
