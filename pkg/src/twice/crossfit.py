"""Two-way ID-blocked cross-fitting, blocked risk and (K, L) grid tuning."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from twice.boost import BoostConfig, BoostLearner
from twice.errors import EmptyGrid, EmptyTrainingCell, ValidationError
from twice.panel import Panel, feature_matrix
from twice.partition import (FirmTarget, PartitionPair, build_firm_partition,
                             build_worker_partition)
from twice.tree import TreeFitConfig


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("TWICE_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; output order is input order."""
    workers = n_threads() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- fold plan


@dataclass
class FoldPlan:
    """Worker ids and firm ids each dealt into ``B`` blocks numbered ``1..B``."""

    B: int
    seed: int
    worker_ids: np.ndarray     # sorted
    worker_block: np.ndarray
    firm_ids: np.ndarray       # sorted
    firm_block: np.ndarray

    def blocks_of(self, panel: Panel) -> tuple[np.ndarray, np.ndarray]:
        """Per-row (worker block, firm block)."""
        return (_lookup(self.worker_ids, self.worker_block, panel.worker_id, "worker"),
                _lookup(self.firm_ids, self.firm_block, panel.firm_id, "firm"))

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(a, b) for a in range(1, self.B + 1) for b in range(1, self.B + 1)]

    def to_dict(self) -> dict:
        return {"B": self.B, "seed": self.seed,
                "worker_block": dict(zip(self.worker_ids.tolist(), self.worker_block.tolist())),
                "firm_block": dict(zip(self.firm_ids.tolist(), self.firm_block.tolist()))}

    @classmethod
    def from_dict(cls, data: dict) -> "FoldPlan":
        wk = sorted(data["worker_block"])
        fk = sorted(data["firm_block"])
        return cls(int(data["B"]), int(data["seed"]),
                   np.array(wk, dtype=str), np.array([data["worker_block"][k] for k in wk], dtype=np.int64),
                   np.array(fk, dtype=str), np.array([data["firm_block"][k] for k in fk], dtype=np.int64))


def _lookup(ids, blocks, query, side):
    pos = np.searchsorted(ids, query)
    pos = np.minimum(pos, len(ids) - 1)
    bad = ids[pos] != query
    if bad.any():
        raise ValidationError(f"{side} id {query[np.argmax(bad)]!r} is not in the fold plan")
    return blocks[pos]


def _deal(n, B, rng):
    block = np.empty(n, dtype=np.int64)
    block[rng.permutation(n)] = np.arange(n) % B + 1
    return block


def make_fold_plan(panel: Panel, B: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle worker and firm ids with ``seed`` and deal them round-robin into ``B`` blocks each."""
    if B < 2:
        raise ValidationError("B must be >= 2")
    if len(panel) == 0:
        raise ValidationError("cannot build folds on an empty panel")
    rng = np.random.default_rng(seed)
    wb = _deal(panel.n_workers, B, rng)
    fb = _deal(panel.n_firms, B, rng)
    return FoldPlan(B, seed, panel.worker_levels.copy(), wb, panel.firm_levels.copy(), fb)


def training_mask(row_a, row_b, a, b) -> np.ndarray:
    """Rows usable for cell ``(a, b)``: neither their worker block is ``a`` nor their firm block is ``b``."""
    return (row_a != a) & (row_b != b)


# --------------------------------------------------------------------------- features


class Featurizer:
    """Predictor design: all covariates, calendar year and, with a partition, both cell ids."""

    def __init__(self, partition: PartitionPair | None = None):
        self.partition = partition

    def base(self, panel: Panel):
        return feature_matrix(panel)

    def augment(self, X, cat, names):
        if self.partition is None:
            return X, cat, names
        wc = self.partition.worker.assign_matrix(X)
        fc = self.partition.firm.assign_matrix(X)
        return (np.column_stack([X, wc, fc]), np.append(cat, [True, True]),
                list(names) + ["worker_cell", "firm_cell"])

    def __call__(self, panel: Panel):
        return self.augment(*self.base(panel))


class PanelModel:
    """A fitted learner plus its featurizer; ``predict`` takes the base design ``[covariates..., year]``."""

    def __init__(self, model, featurizer: Featurizer, names, categorical):
        self.model = model
        self.featurizer = featurizer
        self.feature_names = list(names)
        self.categorical = np.asarray(categorical, dtype=bool)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Xa, _, _ = self.featurizer.augment(X, self.categorical, self.feature_names)
        return self.model.predict(Xa)

    def predict_panel(self, panel: Panel) -> np.ndarray:
        X, _, _ = self.featurizer.base(panel)
        return self.predict(X)


def fit_panel_model(panel: Panel, learner, featurizer: Featurizer | None = None) -> PanelModel:
    featurizer = featurizer or Featurizer()
    X0, cat0, names0 = featurizer.base(panel)
    X, cat, names = featurizer.augment(X0, cat0, names0)
    model = learner(X, panel.log_wage, cat, panel.worker_codes, names)
    return PanelModel(model, featurizer, names0, cat0)


@dataclass(frozen=True)
class PartitionFitter:
    """Fits a partition pair on a training panel (used per fold so cells never see held-out ids)."""

    tree: TreeFitConfig = field(default_factory=TreeFitConfig)
    target: FirmTarget = field(default_factory=FirmTarget)
    weight_by_size: bool = True
    seed: int = 0

    def firm(self, panel: Panel, K: int):
        return build_firm_partition(panel, K, self.target, self.tree, self.weight_by_size, self.seed)

    def worker(self, panel: Panel, L: int):
        return build_worker_partition(panel, L, self.tree)

    def __call__(self, panel: Panel, K: int, L: int) -> PartitionPair:
        return PartitionPair(self.firm(panel, K), self.worker(panel, L), dict(panel.levels))


# --------------------------------------------------------------------------- cross-fitting


@dataclass
class CrossFit:
    predictions: np.ndarray
    models: dict[tuple[int, int], PanelModel]
    empty_cells: list[tuple[int, int]]
    row_a: np.ndarray
    row_b: np.ndarray

    def model_list(self) -> list[PanelModel]:
        return [self.models[k] for k in sorted(self.models)]


def crossfit_predict(panel: Panel, plan: FoldPlan, learner=None, partition: PartitionPair | None = None,
                     partition_for=None) -> CrossFit:
    """Out-of-fold predictions: a row in cell ``(a, b)`` is predicted by the model trained
    on rows whose worker block is not ``a`` and whose firm block is not ``b``.

    ``partition`` fixes the cell ids used as features; ``partition_for(train_panel, (a, b))``
    instead builds them from each training complement.
    """
    learner = learner or BoostLearner(BoostConfig())
    row_a, row_b = plan.blocks_of(panel)
    pred = np.full(len(panel), np.nan)
    empty = []
    jobs = []
    for a, b in plan.cells:
        test = np.flatnonzero((row_a == a) & (row_b == b))
        if len(test) == 0:
            empty.append((a, b))
        train = np.flatnonzero(training_mask(row_a, row_b, a, b))
        if len(train) == 0:
            raise EmptyTrainingCell(a, b)
        jobs.append((a, b, train, test))

    def run(job):
        a, b, train, test = job
        sub = panel.subset(train)
        pair = partition_for(sub, (a, b)) if partition_for is not None else partition
        model = fit_panel_model(sub, learner, Featurizer(pair))
        out = model.predict_panel(panel.subset(test)) if len(test) else np.empty(0)
        return model, out

    results = ordered_map(run, jobs)
    models = {}
    for (a, b, _, test), (model, out) in zip(jobs, results):
        models[(a, b)] = model
        pred[test] = out
    return CrossFit(pred, models, empty, row_a, row_b)


@dataclass
class BlockedRisk:
    cell_mse: np.ndarray       # B x B, nan for empty cells
    loss: float
    cells_used: int
    empty_cells: list[tuple[int, int]]
    weighted_loss: float       # row-weighted pooled MSE, diagnostic only


def blocked_risk(actual, predicted, row_a, row_b, B: int) -> BlockedRisk:
    """Unweighted mean of the per-cell out-of-fold MSEs; empty cells are skipped and listed."""
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if len(actual) != len(predicted):
        raise ValidationError("actuals and predictions differ in length")
    cell = (np.asarray(row_a) - 1) * B + (np.asarray(row_b) - 1)
    err = (actual - predicted) ** 2
    n = np.bincount(cell, minlength=B * B)
    s = np.bincount(cell, weights=err, minlength=B * B)
    mse = np.divide(s, n, out=np.full(B * B, np.nan), where=n > 0)
    used = n > 0
    empty = [(int(c // B) + 1, int(c % B) + 1) for c in np.flatnonzero(~used)]
    loss = float(mse[used].mean()) if used.any() else float("nan")
    weighted = float(err.mean()) if len(err) else float("nan")
    return BlockedRisk(mse.reshape(B, B), loss, int(used.sum()), empty, weighted)


def crossfit_risk(panel: Panel, fit: CrossFit, B: int) -> BlockedRisk:
    return blocked_risk(panel.log_wage, fit.predictions, fit.row_a, fit.row_b, B)


# --------------------------------------------------------------------------- tuning


@dataclass
class TuneResult:
    K: int
    L: int
    loss: float
    table: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "L", "loss", "cells_used"])
        for r in self.table:
            w.writerow([r["K"], r["L"], repr(r["loss"]), r["cells_used"]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"K": self.K, "L": self.L, "loss": self.loss, "table": self.table}


def tune_grid(panel: Panel, K_grid, L_grid, plan: FoldPlan, learner=None,
              fitter: PartitionFitter = PartitionFitter()) -> TuneResult:
    """Blocked risk for every ``(K, L)``; returns the argmin (ties: smaller K, then smaller L).

    Partition trees are refit inside each training complement and cached per
    ``(fold, K)`` and ``(fold, L)``.
    """
    K_grid = sorted(set(int(k) for k in K_grid))
    L_grid = sorted(set(int(v) for v in L_grid))
    if not K_grid or not L_grid:
        raise EmptyGrid("K and L grids must be nonempty")
    firm_cache: dict = {}
    worker_cache: dict = {}

    def pair_for(K, L):
        def build(sub, cell):
            fk, wk = (cell, K), (cell, L)
            if fk not in firm_cache:
                firm_cache[fk] = fitter.firm(sub, K)
            if wk not in worker_cache:
                worker_cache[wk] = fitter.worker(sub, L)
            return PartitionPair(firm_cache[fk], worker_cache[wk], dict(sub.levels))
        return build

    table = []
    for K in K_grid:
        for L in L_grid:
            fit = crossfit_predict(panel, plan, learner, partition_for=pair_for(K, L))
            risk = crossfit_risk(panel, fit, plan.B)
            table.append({"K": K, "L": L, "loss": risk.loss, "cells_used": risk.cells_used})
    best = min(table, key=lambda r: (r["loss"], r["K"], r["L"]))
    return TuneResult(best["K"], best["L"], best["loss"], table)


class MeanLearner:
    """Constant predictor at the training mean; a reference learner for fold arithmetic."""

    class _Model:
        def __init__(self, value):
            self.value = value

        def predict(self, X):
            return np.full(len(X), self.value)

    def __call__(self, X, y, categorical=None, groups=None, feature_names=None):
        return self._Model(float(np.mean(y)))
