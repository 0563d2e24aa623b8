"""Two-way fixed-effects (worker + firm) benchmark, OLS baselines and concordance statistics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.stats import rankdata

from twice.errors import (LengthMismatch, NotConnected, SingularControls, SingularDesign,
                          UnknownFeature, ValidationError)
from twice.graph import mobility_graph
from twice.panel import Panel

CONVENTION = ("wages residualized on the estimated controls; shares are relative to the "
              "variance of residualized wages")


@dataclass(frozen=True)
class AkmControls:
    year_effects: bool = True
    age_column: str | None = "age"
    reference_age: float = 40.0
    age_powers: tuple[int, ...] = (2, 3)


@dataclass
class AkmModel:
    worker_ids: np.ndarray
    theta: np.ndarray          # per worker, row-weighted mean zero
    firm_ids: np.ndarray
    psi: np.ndarray            # per firm, row-weighted mean zero
    intercept: float
    beta: np.ndarray
    control_names: list[str]
    residuals: np.ndarray
    controls_fit: np.ndarray   # X @ beta per row
    diagnostics: dict = field(default_factory=dict)

    def effects_rows(self, kind: str):
        ids = self.worker_ids if kind == "worker" else self.firm_ids
        vals = self.theta if kind == "worker" else self.psi
        return [(str(i), float(v)) for i, v in zip(ids, vals)]


def control_matrix(panel: Panel, controls: AkmControls):
    """Year indicators (first year dropped) and powers of age around the reference age."""
    cols, names = [], []
    if controls.year_effects:
        years = np.unique(panel.year)
        for yv in years[1:]:
            cols.append((panel.year == yv).astype(np.float64))
            names.append(f"year_{yv}")
    if controls.age_column and controls.age_powers:
        if controls.age_column not in panel.schema.names:
            raise UnknownFeature(f"age column {controls.age_column!r} not in schema")
        dev = panel.column(controls.age_column) - controls.reference_age
        for k in controls.age_powers:
            cols.append(dev ** k)
            names.append(f"age_dev^{k}")
    X = np.column_stack(cols) if cols else np.zeros((len(panel), 0))
    return X, names


def _demean(v, codes, counts):
    """Subtract group means; ``v`` may be 1-D or 2-D (rows first)."""
    if v.ndim == 1:
        return v - (np.bincount(codes, weights=v, minlength=len(counts)) / counts)[codes]
    out = np.empty_like(v)
    for j in range(v.shape[1]):
        out[:, j] = _demean(v[:, j], codes, counts)
    return out


def fit_akm(panel: Panel, controls: AkmControls | None = AkmControls(), tol: float = 1e-10,
            max_iter: int | None = None) -> AkmModel:
    """Least squares for ``y = theta_worker + psi_firm + X beta + e`` on a connected panel.

    Worker effects are absorbed by within-worker demeaning; the reduced system for
    firm effects and control coefficients is solved by Jacobi-preconditioned
    conjugate gradient with the largest firm pinned at zero. Effects are then
    re-centered to row-weighted mean zero and the level moves to ``intercept``.
    """
    if len(panel) == 0:
        raise ValidationError("empty panel")
    g = mobility_graph(panel)
    if g.n_components > 1:
        raise NotConnected(f"panel has {g.n_components} connected components; restrict to the largest first")
    y = panel.log_wage
    wc, fc = panel.worker_codes, panel.firm_codes
    nw, nf, n = panel.n_workers, panel.n_firms, len(panel)
    wn = np.bincount(wc, minlength=nw).astype(np.float64)
    fn = np.bincount(fc, minlength=nf)
    X, names = control_matrix(panel, controls) if controls is not None else (np.zeros((n, 0)), [])
    Xd = _demean(X, wc, wn)
    p = X.shape[1]
    if p:
        s = np.linalg.svd(Xd, compute_uv=False)
        if s[-1] <= 1e-10 * max(s[0], 1.0):
            raise SingularControls(f"control columns are collinear after absorbing worker effects ({names})")

    pinned = int(np.lexsort((np.arange(nf), -fn))[0])
    free = np.delete(np.arange(nf), pinned)
    pos = np.full(nf, -1)
    pos[free] = np.arange(nf - 1)
    rows_free = pos[fc] >= 0
    m = nf - 1 + p

    def matvec(z):
        z = np.ravel(z)
        v = np.zeros(n)
        v[rows_free] = z[pos[fc[rows_free]]]
        if p:
            v += X @ z[nf - 1:]
        v = _demean(v, wc, wn)
        out = np.empty(m)
        out[:nf - 1] = np.bincount(fc, weights=v, minlength=nf)[free]
        if p:
            out[nf - 1:] = X.T @ v
        return out

    yd = _demean(y, wc, wn)
    rhs = np.concatenate([np.bincount(fc, weights=yd, minlength=nf)[free], X.T @ yd])
    # Jacobi diagonal: n_j - sum_i n_ij^2 / n_i for firms, squared norms for controls
    pair = wc * nf + fc
    uniq, cnt = np.unique(pair, return_counts=True)
    diag_f = fn.astype(np.float64) - np.bincount(uniq % nf, weights=cnt ** 2 / wn[uniq // nf], minlength=nf)
    diag = np.concatenate([diag_f[free], (Xd ** 2).sum(axis=0)])
    diag = np.where(diag > 1e-14, diag, 1.0)

    iters = [0]

    def count(_):
        iters[0] += 1

    if m:
        A = LinearOperator((m, m), matvec=matvec, dtype=np.float64)
        M = LinearOperator((m, m), matvec=lambda r: np.ravel(r) / diag, dtype=np.float64)
        limit = max_iter if max_iter is not None else 10 * max(m, 1)
        z, info = cg(A, rhs, rtol=tol, atol=0.0, maxiter=limit, M=M, callback=count)
        resid = float(np.linalg.norm(matvec(z) - rhs) / max(np.linalg.norm(rhs), 1e-300))
    else:
        z, info, resid = np.zeros(0), 0, 0.0

    psi = np.zeros(nf)
    psi[free] = z[:nf - 1]
    beta = z[nf - 1:]
    xb = X @ beta
    theta = np.bincount(wc, weights=y - psi[fc] - xb, minlength=nw) / wn
    # row-weighted centering; the common level goes to the intercept
    sp = (psi[fc]).mean()
    st = (theta[wc]).mean()
    psi -= sp
    theta -= st
    intercept = float(st + sp)
    resid_rows = y - intercept - theta[wc] - psi[fc] - xb
    diag_out = {"solver": "pcg", "iterations": iters[0], "converged": info == 0,
                "relative_residual": resid, "pinned_firm": str(panel.firm_levels[pinned]),
                "convention": CONVENTION}
    return AkmModel(panel.worker_levels.copy(), theta, panel.firm_levels.copy(), psi, intercept, beta,
                    names, resid_rows, xb, diag_out)


def akm_decomposition(model: AkmModel, panel: Panel) -> dict:
    """Variance shares of residualized wages over rows with both effects estimated."""
    wpos = np.searchsorted(model.worker_ids, panel.worker_id)
    fpos = np.searchsorted(model.firm_ids, panel.firm_id)
    wpos_c = np.minimum(wpos, len(model.worker_ids) - 1)
    fpos_c = np.minimum(fpos, len(model.firm_ids) - 1)
    keep = (model.worker_ids[wpos_c] == panel.worker_id) & (model.firm_ids[fpos_c] == panel.firm_id)
    th = model.theta[wpos_c[keep]]
    ps = model.psi[fpos_c[keep]]
    res = model.residuals[keep] if len(model.residuals) == len(panel) else None
    y_tilde = panel.log_wage[keep] - (model.controls_fit[keep] if len(model.controls_fit) == len(panel) else 0.0)
    if res is None:
        res = y_tilde - model.intercept - th - ps
    variances = {
        "worker": float(th.var()),
        "firm": float(ps.var()),
        "sorting": float(2.0 * np.mean((th - th.mean()) * (ps - ps.mean()))),
        "residual": float(res.var()),
    }
    var_y = float(y_tilde.var())
    shares = {k: (v / var_y if var_y > 0 else 0.0) for k, v in variances.items()}
    return {"method": "akm", "var_y": var_y, "variances": variances, "shares": shares,
            "diagnostics": {"rows_used": int(keep.sum()), "rows_dropped": int((~keep).sum()),
                            "convention": CONVENTION}}


# --------------------------------------------------------------------------- OLS baselines

POLY_COLUMNS = ("age", "tenure", "log_size", "log_revenue")


@dataclass
class OlsBaseline:
    degree: int
    name: str
    columns: list[str]
    coefficients: np.ndarray
    train_mse: float
    test_mse: float
    train_r2: float
    test_r2: float

    def to_dict(self) -> dict:
        return {"model": self.name, "degree": self.degree, "train_mse": self.train_mse,
                "test_mse": self.test_mse, "train_r2": self.train_r2, "test_r2": self.test_r2,
                "n_coefficients": len(self.columns)}


def r_squared(actual, predicted) -> float:
    """Squared Pearson correlation; 0 when either side is constant."""
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(predicted, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if len(a) < 2 or sa <= 1e-14 * max(1.0, abs(a.mean())) or sb <= 1e-14 * max(1.0, abs(b.mean())):
        return 0.0
    return float(np.corrcoef(a, b)[0, 1] ** 2)


class _OlsDesign:
    """Design builder frozen on the training panel (levels, scaling) and reusable on test rows."""

    def __init__(self, train: Panel, degree: int, poly_columns=POLY_COLUMNS, reference_age=40.0):
        self.degree = degree
        self.years = np.unique(train.year)[1:]
        self.schema = train.schema
        self.reference_age = reference_age
        schema_names = train.schema.names
        if degree == 0:
            if "age" not in schema_names:
                raise UnknownFeature("the simple baseline needs an 'age' column")
            self.linear = []
            self.poly = []
        else:
            self.linear = list(range(len(schema_names)))
            self.poly = [schema_names.index(c) for c in poly_columns if c in schema_names]
        self.cat_levels = {j: np.unique(train.covariates[:, j]).astype(np.int64)[1:]
                           for j in self.linear if train.schema.columns[j].categorical}
        P = train.covariates[:, self.poly]
        self.center = P.mean(axis=0) if len(self.poly) else np.zeros(0)
        sd = P.std(axis=0) if len(self.poly) else np.zeros(0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def build(self, panel: Panel):
        cols, names = [np.ones(len(panel))], ["const"]
        for yv in self.years:
            cols.append((panel.year == yv).astype(np.float64))
            names.append(f"year_{yv}")
        if self.degree == 0:
            dev = (panel.column("age") - self.reference_age) / 10.0
            for k in (1, 2, 3):
                cols.append(dev ** k)
                names.append(f"age^{k}")
            return np.column_stack(cols), names
        for j in self.linear:
            c = self.schema.columns[j]
            if c.categorical:
                for lev in self.cat_levels[j]:
                    cols.append((panel.covariates[:, j] == lev).astype(np.float64))
                    names.append(f"{c.name}={lev}")
            else:
                cols.append(panel.covariates[:, j])
                names.append(c.name)
        Z = (panel.covariates[:, self.poly] - self.center) / self.scale
        pn = [self.schema.columns[j].name for j in self.poly]
        for d in range(2, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(len(self.poly)), d):
                cols.append(np.prod(Z[:, list(combo)], axis=1))
                names.append("*".join(pn[k] for k in combo))
        return np.column_stack(cols), names


def fit_ols(train: Panel, test: Panel, degree: int, poly_columns=POLY_COLUMNS) -> OlsBaseline:
    design = _OlsDesign(train, degree, poly_columns)
    X, names = design.build(train)
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if len(d) == 0 or d.min() <= 1e-10 * d.max():
        raise SingularDesign(f"degree-{degree} design is rank deficient ({X.shape[1]} columns)")
    coef = np.linalg.solve(R, Q.T @ train.log_wage)
    fit_tr = X @ coef
    Xt, _ = design.build(test)
    fit_te = Xt @ coef
    label = "OLS simple" if degree == 0 else f"OLS degree-{degree} poly"
    return OlsBaseline(degree, label, names, coef,
                       float(np.mean((train.log_wage - fit_tr) ** 2)),
                       float(np.mean((test.log_wage - fit_te) ** 2)),
                       r_squared(train.log_wage, fit_tr), r_squared(test.log_wage, fit_te))


def fit_ols_baselines(train: Panel, test: Panel, degrees: Sequence[int] = (0, 1, 2, 3),
                      poly_columns=POLY_COLUMNS) -> list[OlsBaseline]:
    if train.schema != test.schema:
        raise ValidationError("train and test schemas differ")
    return [fit_ols(train, test, d, poly_columns) for d in degrees]


# --------------------------------------------------------------------------- concordance


class EtaSquared(NamedTuple):
    value: float
    zero_variance: bool


def eta_squared(effects, classes, weights=None) -> EtaSquared:
    """Between-class share of the weighted variance of ``effects``.

    When every effect is equal the ratio is undefined; the value is then 0 and
    ``zero_variance`` is set.
    """
    e = np.asarray(effects, dtype=np.float64)
    c = np.asarray(classes)
    if len(e) != len(c):
        raise LengthMismatch("effects and classes differ in length")
    w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(e):
        raise LengthMismatch("weights and effects differ in length")
    if len(e) == 0 or w.sum() <= 0:
        return EtaSquared(0.0, True)
    _, codes = np.unique(c, return_inverse=True)
    mean = (w * e).sum() / w.sum()
    total = (w * (e - mean) ** 2).sum()
    if total <= 1e-14 * max(1.0, (w * e ** 2).sum()):
        return EtaSquared(0.0, True)
    cw = np.bincount(codes, weights=w)
    cm = np.bincount(codes, weights=w * e) / np.where(cw > 0, cw, 1.0)
    within = (w * (e - cm[codes]) ** 2).sum()
    return EtaSquared(float(min(max(1.0 - within / total, 0.0), 1.0)), False)


def spearman(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise LengthMismatch("x and y differ in length")
    if len(x) < 2:
        raise LengthMismatch("need at least two points")
    rx, ry = rankdata(x), rankdata(y)
    if rx.std() == 0 or ry.std() == 0:
        return float("nan")
    return float(np.corrcoef(rx, ry)[0, 1])
