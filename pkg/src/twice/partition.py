"""Observable-anchored firm and worker cells (supervised trees over covariates)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from twice.boost import BoostConfig, fit_with_holdout
from twice.decompose import Assignment
from twice.errors import ValidationError
from twice.panel import FIRM, WORKER, Panel, feature_matrix
from twice.tree import RegressionTree, TreeFitConfig, fit_tree

TARGET_KINDS = ("mean", "median", "residual")


@dataclass(frozen=True)
class FirmTarget:
    """Firm-year wage summary the firm tree is trained on."""

    kind: str = "mean"
    worker_model: BoostConfig = field(default_factory=BoostConfig)
    folds: int = 5

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValidationError(f"firm target must be one of {TARGET_KINDS}, not {self.kind!r}")


@dataclass(frozen=True)
class PartitionSpec:
    K: int
    L: int
    tree: TreeFitConfig = field(default_factory=TreeFitConfig)
    target: FirmTarget = field(default_factory=FirmTarget)
    weight_by_size: bool = True


@dataclass
class CellTree:
    """A fitted partition tree plus the panel columns it reads and its dense leaf labels."""

    side: str
    tree: RegressionTree
    columns: list[int]
    uses_year: bool
    leaf_cells: dict[int, int]      # leaf node id -> cell id in 1..n_cells, left-to-right

    @property
    def n_cells(self) -> int:
        return len(self.leaf_cells)

    def design(self, panel: Panel) -> np.ndarray:
        X, _, _ = feature_matrix(panel, self.columns, include_year=self.uses_year)
        return X

    def _relabel(self, leaves):
        lut = np.zeros(self.tree.n_nodes, dtype=np.int64)
        for node, cell in self.leaf_cells.items():
            lut[node] = cell
        return lut[leaves]

    def assign(self, panel: Panel) -> np.ndarray:
        return self._relabel(self.tree.apply(self.design(panel)))

    def assign_matrix(self, X) -> np.ndarray:
        """Cells from a full design ``[covariates..., year]`` as built by ``feature_matrix``."""
        X = np.asarray(X, dtype=np.float64)
        cols = self.columns + ([X.shape[1] - 1] if self.uses_year else [])
        return self._relabel(self.tree.apply(X[:, cols]))

    def to_dict(self) -> dict:
        return {"side": self.side, "columns": self.columns, "uses_year": self.uses_year,
                "leaf_cells": {str(k): v for k, v in self.leaf_cells.items()}, "tree": self.tree.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "CellTree":
        return cls(data["side"], RegressionTree.from_dict(data["tree"]), list(data["columns"]),
                   bool(data["uses_year"]), {int(k): int(v) for k, v in data["leaf_cells"].items()})


@dataclass
class PartitionPair:
    firm: CellTree
    worker: CellTree
    levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.firm.n_cells

    @property
    def L(self) -> int:
        return self.worker.n_cells

    def to_dict(self) -> dict:
        return {"firm": self.firm.to_dict(), "worker": self.worker.to_dict(),
                "levels": {k: list(v) for k, v in self.levels.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionPair":
        return cls(CellTree.from_dict(data["firm"]), CellTree.from_dict(data["worker"]),
                   {k: tuple(v) for k, v in data.get("levels", {}).items()})


def _cell_tree(side, tree, columns, uses_year):
    return CellTree(side, tree, list(columns), uses_year,
                    {node: i + 1 for i, node in enumerate(tree.leaves_in_order())})


def _group_first(keys):
    """Sorted unique keys, inverse codes and the first row of each group."""
    uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    return uniq, inv, first


def _group_median(values, codes, n_groups):
    order = np.lexsort((values, codes))
    sorted_codes = codes[order]
    bounds = np.searchsorted(sorted_codes, np.arange(n_groups + 1))
    v = values[order]
    lo = bounds[:-1]
    cnt = np.diff(bounds)
    return 0.5 * (v[lo + (cnt - 1) // 2] + v[lo + cnt // 2])


def worker_residuals(panel: Panel, target: FirmTarget, seed: int = 0) -> np.ndarray:
    """Wages minus out-of-fold predictions of a worker-covariates-only boosted model,
    cross-fitted over blocks of worker ids."""
    cols = panel.schema.side_indices(WORKER)
    X, cat, names = feature_matrix(panel, cols, include_year=True)
    y = panel.log_wage
    B = min(target.folds, panel.n_workers)
    if B < 2:
        return y - y.mean()
    block = np.empty(panel.n_workers, dtype=np.int64)
    block[np.random.default_rng(seed).permutation(panel.n_workers)] = np.arange(panel.n_workers) % B
    row_block = block[panel.worker_codes]
    oof = np.empty(len(y))
    for b in range(B):
        test = row_block == b
        train = ~test
        model = fit_with_holdout(X[train], y[train], panel.worker_codes[train], target.worker_model, cat, names)
        oof[test] = model.predict(X[test])
    return y - oof


def firm_year_table(panel: Panel, target: FirmTarget = FirmTarget(), seed: int = 0):
    """One record per firm-year: ``(X, y, weight, row_group)`` with firm covariates plus year."""
    nyears_key = panel.year - panel.year.min()
    key = panel.firm_codes * (int(nyears_key.max()) + 1) + nyears_key
    uniq, inv, first = _group_first(key)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    if target.kind == "mean":
        values = panel.log_wage
    elif target.kind == "residual":
        values = worker_residuals(panel, target, seed)
    else:
        values = None
    if values is None:
        y = _group_median(panel.log_wage, inv, len(uniq))
    else:
        y = np.bincount(inv, weights=values, minlength=len(uniq)) / counts
    cols = panel.schema.side_indices(FIRM)
    X, cat, names = feature_matrix(panel.subset(first), cols, include_year=True)
    return X, y, counts, cat, names, cols


def build_firm_partition(panel: Panel, K: int, target: FirmTarget = FirmTarget(),
                         config: TreeFitConfig = TreeFitConfig(), weight_by_size: bool = True,
                         seed: int = 0) -> CellTree:
    """Tree with at most ``K`` leaves over firm covariates and calendar year, fit to a firm-year wage target."""
    if K < 1:
        raise ValidationError("K must be >= 1")
    X, y, counts, cat, names, cols = firm_year_table(panel, target, seed)
    weights = counts if weight_by_size else None
    cfg = TreeFitConfig(K, config.min_leaf_size, config.max_depth, config.numeric_candidate_quantiles, config.seed)
    tree = fit_tree(X, y, weights, cfg, cat, names)
    return _cell_tree(FIRM, tree, cols, True)


def worker_table(panel: Panel):
    """One record per worker: mean wage, mean numeric covariates, modal categorical covariates."""
    cols = panel.schema.side_indices(WORKER)
    codes = panel.worker_codes
    nw = panel.n_workers
    counts = np.bincount(codes, minlength=nw).astype(np.float64)
    y = np.bincount(codes, weights=panel.log_wage, minlength=nw) / counts
    X = np.empty((nw, len(cols)))
    cat = panel.schema.categorical_mask[cols]
    for out, j in enumerate(cols):
        v = panel.covariates[:, j]
        if cat[out]:
            nlev = int(v.max()) + 1 if len(v) else 1
            tab = np.bincount(codes * nlev + v.astype(np.int64), minlength=nw * nlev).reshape(nw, nlev)
            X[:, out] = np.argmax(tab, axis=1)      # ties resolve to the first-interned level
        else:
            X[:, out] = np.bincount(codes, weights=v, minlength=nw) / counts
    names = [panel.schema.columns[j].name for j in cols]
    return X, y, counts, cat, names, cols


def build_worker_partition(panel: Panel, L: int, config: TreeFitConfig = TreeFitConfig(),
                           weight_by_rows: bool = False) -> CellTree:
    """Tree with at most ``L`` leaves over worker-level averages; calendar year is never a feature."""
    if L < 1:
        raise ValidationError("L must be >= 1")
    X, y, counts, cat, names, cols = worker_table(panel)
    cfg = TreeFitConfig(L, config.min_leaf_size, config.max_depth, config.numeric_candidate_quantiles, config.seed)
    tree = fit_tree(X, y, counts if weight_by_rows else None, cfg, cat, names)
    return _cell_tree(WORKER, tree, cols, False)


def build_partitions(panel: Panel, spec: PartitionSpec, seed: int = 0) -> PartitionPair:
    firm = build_firm_partition(panel, spec.K, spec.target, spec.tree, spec.weight_by_size, seed)
    worker = build_worker_partition(panel, spec.L, spec.tree)
    return PartitionPair(firm, worker, dict(panel.levels))


def assign_cells(panel: Panel, pair: PartitionPair) -> Assignment:
    """Per-row (worker cell, firm cell) from period-specific covariates."""
    return Assignment(pair.worker.assign(panel), pair.firm.assign(panel))


@dataclass(frozen=True)
class CellRule:
    side: str
    cell: int
    conditions: tuple[str, ...]
    size: float
    mean_target: float

    def __str__(self) -> str:
        body = " and ".join(self.conditions) if self.conditions else "all"
        return f"{self.side} cell {self.cell}: {body} (n={self.size:g}, mean={self.mean_target:.4f})"


def _fmt_condition(tree: RegressionTree, levels, cond):
    f, op, operand = cond
    name = tree.feature_names[f]
    if op == "in":
        labels = levels.get(name)
        shown = [labels[c] if labels and c < len(labels) else str(c) for c in operand]
        return f"{name} in {{{', '.join(shown)}}}"
    return f"{name} {'<' if op == '<' else '≥'} {operand:.6g}"


def describe_side(cells: CellTree, levels=None) -> list[CellRule]:
    levels = levels or {}
    paths = cells.tree.paths()
    out = []
    for node, cell in sorted(cells.leaf_cells.items(), key=lambda kv: kv[1]):
        conds = tuple(_fmt_condition(cells.tree, levels, c) for c in paths[node])
        out.append(CellRule(cells.side, cell, conds, float(cells.tree.weight[node]), float(cells.tree.value[node])))
    return out


def describe_cells(pair: PartitionPair) -> list[CellRule]:
    """Root-to-leaf rule for every worker cell, then every firm cell."""
    return describe_side(pair.worker, pair.levels) + describe_side(pair.firm, pair.levels)


def rules_to_dict(rules: list[CellRule]) -> list[dict]:
    return [asdict(r) | {"conditions": list(r.conditions)} for r in rules]
