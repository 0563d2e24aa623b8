"""Cell means, weighted additive projection and the five-way variance decomposition."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from twice.errors import NoConvergence, ValidationError

COMPONENTS = ("worker", "firm", "sorting", "interaction", "residual")


class Assignment(NamedTuple):
    """Per-row worker cell and firm cell, both 1-based."""

    worker_cell: np.ndarray
    firm_cell: np.ndarray


@dataclass
class CellStats:
    """Dense L x K tables; unobserved cells have ``n == 0``, ``pi == 0`` and ``mu`` nan."""

    n: np.ndarray
    pi: np.ndarray
    mu: np.ndarray
    grand_mean: float

    @property
    def shape(self):
        return self.n.shape

    @property
    def pi_worker(self) -> np.ndarray:
        return self.pi.sum(axis=1)

    @property
    def pi_firm(self) -> np.ndarray:
        return self.pi.sum(axis=0)

    @property
    def observed(self) -> np.ndarray:
        return self.n > 0

    @property
    def singleton_cells(self) -> int:
        return int((self.n == 1).sum())

    @classmethod
    def from_tables(cls, pi, mu, n=None) -> "CellStats":
        """Build directly from share and mean tables (used for cell-level experiments)."""
        pi = np.asarray(pi, dtype=np.float64)
        mu = np.where(pi > 0, np.asarray(mu, dtype=np.float64), np.nan)
        if n is None:
            n = (pi > 0).astype(np.int64)
        grand = float(np.nansum(pi * np.nan_to_num(mu)) / pi.sum())
        return cls(np.asarray(n), pi / pi.sum(), mu, grand)


@dataclass
class ProjectedEffects:
    alpha: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray      # L x K, nan on unobserved cells
    iterations: int
    max_change: float
    method: str
    components: int        # connected components of the observed-cell graph

    def diagnostics(self) -> dict:
        return {"method": self.method, "iterations": self.iterations,
                "max_change": self.max_change, "cell_graph_components": self.components}


@dataclass
class Decomposition:
    variances: dict[str, float]
    shares: dict[str, float]
    var_y: float
    xi: np.ndarray = field(repr=False)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": "twice", "var_y": self.var_y, "variances": self.variances,
                "shares": self.shares, "diagnostics": self.diagnostics}


@dataclass
class SortingMatrix:
    worker_cells: np.ndarray   # row ids, ascending alpha
    firm_cells: np.ndarray     # column ids, ascending psi
    shares: np.ndarray         # rows x columns; each column sums to one


def _as_arrays(y, assignment):
    y = np.asarray(getattr(y, "log_wage", y), dtype=np.float64)
    wc = np.asarray(assignment[0], dtype=np.int64)
    fc = np.asarray(assignment[1], dtype=np.int64)
    if not (len(y) == len(wc) == len(fc)):
        raise ValidationError("wages and cell assignments have different lengths")
    if len(y) == 0:
        raise ValidationError("empty input")
    if wc.min() < 1 or fc.min() < 1:
        raise ValidationError("cell ids are 1-based")
    return y, wc, fc


def cell_stats(y, assignment, shape: tuple[int, int] | None = None) -> CellStats:
    """Empirical shares ``pi`` and mean wages ``mu`` per (worker cell, firm cell)."""
    y, wc, fc = _as_arrays(y, assignment)
    L, K = shape if shape is not None else (int(wc.max()), int(fc.max()))
    flat = (wc - 1) * K + (fc - 1)
    n = np.bincount(flat, minlength=L * K).reshape(L, K)
    sums = np.bincount(flat, weights=y, minlength=L * K).reshape(L, K)
    mu = np.divide(sums, n, out=np.full((L, K), np.nan), where=n > 0)
    return CellStats(n, n / len(y), mu, float(y.mean()))


def _cell_graph_labels(pi):
    L, K = pi.shape
    r, c = np.nonzero(pi > 0)
    g = coo_matrix((np.ones(len(r)), (r, L + c)), shape=(L + K, L + K))
    ncomp, labels = connected_components(g, directed=False)
    return labels[:L], labels[L:], ncomp


def normalize_components(pi, alpha, psi):
    """Fix the additive indeterminacy: firm effects have pi-weighted mean zero within every
    connected component of the observed-cell graph. Worker effects are then centered too."""
    pi = np.asarray(pi)
    alpha = np.array(alpha, dtype=np.float64)
    psi = np.array(psi, dtype=np.float64)
    pw, pf = pi.sum(axis=1), pi.sum(axis=0)
    lw, lf, _ = _cell_graph_labels(pi)
    for comp in np.unique(lf[pf > 0]):
        fk = (lf == comp) & (pf > 0)
        shift = (pf[fk] * psi[fk]).sum() / pf[fk].sum()
        psi[fk] -= shift
        alpha[(lw == comp) & (pw > 0)] += shift
    alpha[pw == 0] = 0.0
    psi[pf == 0] = 0.0
    return alpha, psi


def weighted_cell_projection(pi, mu_cell, mu):
    """Solve the weighted two-way ANOVA normal equations directly (dense)."""
    pi = np.asarray(pi, dtype=np.float64)
    L, K = pi.shape
    dev = np.where(pi > 0, np.nan_to_num(mu_cell) - mu, 0.0)
    pw, pf = pi.sum(axis=1), pi.sum(axis=0)
    A = np.zeros((L + K, L + K))
    A[:L, :L] = np.diag(pw)
    A[L:, L:] = np.diag(pf)
    A[:L, L:] = pi
    A[L:, :L] = pi.T
    rhs = np.concatenate([(pi * dev).sum(axis=1), (pi * dev).sum(axis=0)])
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return sol[:L], sol[L:]


def project_additive(stats: CellStats, tol: float = 1e-10, max_iter: int = 10_000,
                     method: str = "backfit") -> ProjectedEffects:
    """Weighted additive projection of cell means onto worker and firm effects.

    ``method="backfit"`` alternates the two first-order conditions (Gauss-Seidel)
    until the largest coefficient change falls below ``tol``; ``"direct"`` solves
    the dense normal equations and is meant for small ``L*K``.
    """
    pi = stats.pi
    mu = stats.grand_mean
    pw, pf = stats.pi_worker, stats.pi_firm
    dev = np.where(pi > 0, np.nan_to_num(stats.mu) - mu, 0.0)
    L, K = pi.shape
    _, _, ncomp = _cell_graph_labels(pi)
    ncomp -= int((pw == 0).sum() + (pf == 0).sum())   # isolated empty cells are not components

    if method == "direct":
        alpha, psi = weighted_cell_projection(pi, stats.mu, mu)
        iterations, change = 1, 0.0
    elif method == "backfit":
        w_share = np.divide(pi, pw[:, None], out=np.zeros_like(pi), where=pw[:, None] > 0)
        f_share = np.divide(pi, pf[None, :], out=np.zeros_like(pi), where=pf[None, :] > 0)
        w_dev = (w_share * dev).sum(axis=1)
        f_dev = (f_share * dev).sum(axis=0)
        alpha = np.zeros(L)
        psi = np.zeros(K)
        change = np.inf
        iterations = 0
        while iterations < max_iter:
            iterations += 1
            new_alpha = w_dev - w_share @ psi
            new_psi = f_dev - new_alpha @ f_share
            new_alpha -= pw @ new_alpha
            new_psi -= pf @ new_psi
            change = max(np.abs(new_alpha - alpha).max(initial=0.0), np.abs(new_psi - psi).max(initial=0.0))
            alpha, psi = new_alpha, new_psi
            if change < tol:
                break
        else:
            raise NoConvergence(max_iter, (alpha, psi), change)
    else:
        raise ValidationError(f"unknown projection method {method!r}")

    alpha, psi = normalize_components(pi, alpha, psi)
    kappa = np.where(pi > 0, dev - alpha[:, None] - psi[None, :], np.nan)
    return ProjectedEffects(alpha, psi, kappa, iterations, float(change), method, int(ncomp))


def decompose_variance(y, assignment, effects: ProjectedEffects, stats: CellStats | None = None) -> Decomposition:
    """Row-level worker, firm, sorting, interaction and residual variances (population moments)."""
    y, wc, fc = _as_arrays(y, assignment)
    if stats is None:
        stats = cell_stats(y, (wc, fc), shape=(len(effects.alpha), len(effects.psi)))
    a = effects.alpha[wc - 1]
    p = effects.psi[fc - 1]
    k = effects.kappa[wc - 1, fc - 1]
    xi = y - stats.mu[wc - 1, fc - 1]
    variances = {
        "worker": float(a.var()),
        "firm": float(p.var()),
        "sorting": float(2.0 * np.mean((a - a.mean()) * (p - p.mean()))),
        "interaction": float(k.var()),
        "residual": float(xi.var()),
    }
    var_y = float(y.var())
    shares = {c: (v / var_y if var_y > 0 else 0.0) for c, v in variances.items()}
    diagnostics = dict(effects.diagnostics())
    diagnostics.update({
        "observed_cells": int(stats.observed.sum()),
        "singleton_cells": stats.singleton_cells,
        "worker_cells": int(len(effects.alpha)),
        "firm_cells": int(len(effects.psi)),
        "closure_gap": float(sum(variances.values()) - var_y),
    })
    return Decomposition(variances, shares, var_y, xi, diagnostics)


def sorting_matrix(assignment, effects: ProjectedEffects) -> SortingMatrix:
    """Worker-cell composition of each firm cell; firm cells by ascending psi, worker cells by ascending alpha."""
    wc = np.asarray(assignment[0], dtype=np.int64)
    fc = np.asarray(assignment[1], dtype=np.int64)
    L, K = len(effects.alpha), len(effects.psi)
    counts = np.bincount((wc - 1) * K + (fc - 1), minlength=L * K).reshape(L, K).astype(np.float64)
    rows = np.flatnonzero(counts.sum(axis=1) > 0)
    cols = np.flatnonzero(counts.sum(axis=0) > 0)
    rows = rows[np.lexsort((rows, effects.alpha[rows]))]
    cols = cols[np.lexsort((cols, effects.psi[cols]))]
    sub = counts[np.ix_(rows, cols)]
    return SortingMatrix(rows + 1, cols + 1, sub / sub.sum(axis=0, keepdims=True))


def twice_decomposition(y, assignment, shape=None, **projection_kw):
    """Convenience: cell stats, projection and variance decomposition in one call."""
    stats = cell_stats(y, assignment, shape=shape)
    effects = project_additive(stats, **projection_kw)
    return stats, effects, decompose_variance(y, assignment, effects, stats)
