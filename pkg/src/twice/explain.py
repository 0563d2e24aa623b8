"""Partial dependence and accumulated local effects for fitted predictors."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from twice.errors import DegenerateSupport, EmptyGrid, UnknownFeature, ValidationError
from twice.panel import Panel, feature_matrix

VARIANTS = ("pdp_full", "pdp_reference", "pdp_conditional")
LOG_AXIS_FEATURES = ("tenure",)


@dataclass(frozen=True)
class CurveSpec:
    """Which curve to draw.

    ``subgroup`` names columns kept at their row values by the reference variant;
    ``pinned`` holds ``(column, value)`` pairs for the conditional variant, where
    the value may be a number or ``"median"`` / ``"mode"``.
    """

    feature: str
    grid_points: int = 40
    trim: tuple[float, float] = (0.10, 0.90)
    variant: str = "pdp_full"
    subgroup: tuple[str, ...] = ()
    pinned: tuple[tuple[str, object], ...] = ()
    axis_hint: str | None = None

    def __post_init__(self):
        lo, hi = self.trim
        if not 0 <= lo < hi <= 1:
            raise ValidationError("trim quantiles must satisfy 0 <= lower < upper <= 1")
        if self.grid_points < 2:
            raise ValidationError("grid_points must be >= 2")
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}")

    @property
    def hint(self) -> str:
        if self.axis_hint:
            return self.axis_hint
        return "log" if self.feature in LOG_AXIS_FEATURES else "linear"


@dataclass
class Curve:
    feature: str
    variant: str
    grid: np.ndarray
    value: np.ndarray
    support: np.ndarray
    axis_hint: str = "linear"
    labels: list[str] | None = field(default=None, repr=False)   # categorical focal levels

    def rows(self):
        for i in range(len(self.grid)):
            g = self.labels[i] if self.labels else repr(float(self.grid[i]))
            yield [g, repr(float(self.value[i])), int(self.support[i]), self.variant, self.feature, self.axis_hint]


def curves_to_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["grid", "value", "support", "variant", "feature", "axis_hint"])
    for c in curves:
        w.writerows(c.rows())
    return buf.getvalue()


def _design(data, feature_names=None, categorical=None):
    if isinstance(data, Panel):
        X, cat, names = feature_matrix(data)
        return X, names, cat, data.levels
    X = np.asarray(data, dtype=np.float64)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    cat = np.zeros(X.shape[1], dtype=bool) if categorical is None else np.asarray(categorical, dtype=bool)
    return X, names, cat, {}


def _models(models):
    return list(models) if isinstance(models, (list, tuple)) else [models]


def _predict(models, X):
    out = np.zeros(len(X))
    for m in models:
        out += m.predict(X) if hasattr(m, "predict") else m(X)
    return out / len(models)


def _column(names, name):
    if name not in names:
        raise UnknownFeature(f"unknown feature {name!r}")
    return names.index(name)


def _baseline(x, categorical):
    if categorical:
        vals, counts = np.unique(x, return_counts=True)
        return float(vals[np.argmax(counts)])
    return float(np.median(x))


def _trimmed(x, trim):
    lo, hi = np.quantile(x, trim, method="inverted_cdf")
    return x[(x >= lo) & (x <= hi)]


def pdp_grid(x, spec: CurveSpec) -> np.ndarray:
    inside = _trimmed(x, spec.trim)
    if len(inside) == 0:
        raise EmptyGrid(f"no values of {spec.feature!r} inside the trim range")
    q = np.linspace(0.0, 1.0, spec.grid_points)
    return np.unique(np.quantile(inside, q, method="inverted_cdf"))


def pdp(models, data, spec: CurveSpec, feature_names=None, categorical=None) -> Curve:
    """Average prediction as the focal feature is set to each grid value.

    With several models (e.g. the cross-fitted set) the row-averaged curves are
    averaged over models. Categorical focal features enumerate their levels.
    """
    models = _models(models)
    X, names, cat, levels = _design(data, feature_names, categorical)
    j = _column(names, spec.feature)
    base = X.copy()
    if spec.variant == "pdp_reference":
        keep = {j} | {_column(names, c) for c in spec.subgroup}
        for k in range(X.shape[1]):
            if k not in keep:
                base[:, k] = _baseline(X[:, k], cat[k])
        if not spec.subgroup:
            base = base[:1]
    elif spec.variant == "pdp_conditional":
        for name, value in spec.pinned:
            k = _column(names, name)
            if value in ("median", "mode"):
                value = _baseline(X[:, k], cat[k] or value == "mode")
            base[:, k] = float(value)

    x = X[:, j]
    labels = None
    if cat[j]:
        grid = np.unique(x)
        support = np.array([(x == g).sum() for g in grid])
        lev = levels.get(spec.feature)
        labels = [lev[int(g)] if lev else str(int(g)) for g in grid]
    else:
        grid = pdp_grid(x, spec)
        mids = 0.5 * (grid[1:] + grid[:-1])
        inside = _trimmed(x, spec.trim)
        support = np.bincount(np.searchsorted(mids, inside, side="left"), minlength=len(grid))
    values = np.empty(len(grid))
    for i, g in enumerate(grid):
        Z = base.copy()
        Z[:, j] = g
        values[i] = _predict(models, Z).mean()
    return Curve(spec.feature, spec.variant, grid, values, support, spec.hint, labels)


def ale_edges(x, spec: CurveSpec) -> np.ndarray:
    inside = _trimmed(x, spec.trim)
    edges = np.unique(np.quantile(inside, np.linspace(0.0, 1.0, spec.grid_points), method="inverted_cdf"))
    if len(edges) < 2:
        raise DegenerateSupport(f"{spec.feature!r} has fewer than two distinct values in the trim range")
    return edges


def _bin_rows(x, edges):
    """Bin index 1..m for rows inside ``[edges[0], edges[-1]]`` (first bin closed on the left), else 0."""
    b = np.searchsorted(edges, x, side="left")
    b[x == edges[0]] = 1
    b[(x < edges[0]) | (x > edges[-1])] = 0
    return b


def ale(models, data, spec: CurveSpec, feature_names=None, categorical=None) -> Curve:
    """First-order accumulated local effects at quantile bin edges, centered by bin support.

    Empty bins are merged into their right neighbour (the last one into its left).
    """
    models = _models(models)
    X, names, cat, _ = _design(data, feature_names, categorical)
    j = _column(names, spec.feature)
    if cat[j]:
        raise DegenerateSupport("accumulated local effects need a numeric focal feature")
    x = X[:, j]
    edges = ale_edges(x, spec)
    while True:
        b = _bin_rows(x, edges)
        counts = np.bincount(b, minlength=len(edges))[1:]
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0 or len(edges) == 2:
            break
        k = empty[0]
        drop = k + 1 if k + 1 < len(edges) - 1 else k
        edges = np.delete(edges, drop)
    if counts.sum() == 0:
        raise DegenerateSupport(f"no rows of {spec.feature!r} inside the bin range")
    effect = np.zeros(len(edges) - 1)
    rows = np.flatnonzero(b > 0)
    Z = X[rows].copy()
    Z[:, j] = edges[b[rows]]
    upper = _predict(models, Z)
    Z[:, j] = edges[b[rows] - 1]
    lower = _predict(models, Z)
    diff = np.bincount(b[rows] - 1, weights=upper - lower, minlength=len(edges) - 1)
    effect = np.divide(diff, counts, out=np.zeros(len(edges) - 1), where=counts > 0)
    acc = np.concatenate([[0.0], np.cumsum(effect)])
    support = np.concatenate([[0], counts])
    acc -= (support * acc).sum() / support.sum()
    return Curve(spec.feature, "ale", edges, acc, support, spec.hint)


def importance(models) -> list[tuple[str, float]]:
    """Gain shares averaged over models; each model contributes its own normalized shares."""
    totals: dict[str, float] = {}
    models = _models(models)
    for m in models:
        inner = getattr(m, "model", m)
        gains = inner.gains
        s = gains.sum()
        if s <= 0:
            continue
        for name, g in zip(inner.feature_names, gains / s):
            totals[name] = totals.get(name, 0.0) + float(g) / len(models)
    return sorted(((k, v) for k, v in totals.items() if v > 0), key=lambda kv: (-kv[1], kv[0]))
