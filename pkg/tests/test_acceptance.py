"""Acceptance criteria 1-10. Each test prints a single PASS/FAIL line, then asserts."""

import time

import numpy as np
import pytest

from conftest import random_panel
from test_akm import dense_akm_oracle
from test_decompose import dense_wls_oracle, random_stats
from twice.akm import eta_squared, fit_akm, fit_ols_baselines, r_squared, spearman
from twice.boost import BoostConfig, BoostLearner, fit_boosted
from twice.crossfit import (Featurizer, PartitionFitter, crossfit_predict, fit_panel_model, make_fold_plan,
                            training_mask, tune_grid)
from twice.decompose import project_additive, twice_decomposition
from twice.explain import CurveSpec, ale, pdp
from twice.graph import largest_connected_set
from twice.panel import SyntheticSpec, holdout_split, simulate
from twice.partition import (FirmTarget, PartitionPair, PartitionSpec, assign_cells, build_firm_partition,
                             build_partitions, build_worker_partition)
from twice.tree import TreeFitConfig

LEAF20 = TreeFitConfig(min_leaf_size=20)


@pytest.fixture
def verdict(capsys):
    def report(number, title, checks, detail=""):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        if failed:
            line += f"  failed: {', '.join(failed)}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def test_criterion_01_closure_and_orthogonality(verdict):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst_closure = worst_ak = worst_pk = 0.0
    for i in range(50):
        n = int(rng.integers(10_000, 100_001))
        years = int(rng.integers(3, 8))
        spec = SyntheticSpec(n_workers=n // years, n_firms=int(rng.integers(50, 400)), n_years=years,
                             sorting_strength=float(rng.uniform(0, 1)), noise_sd=float(rng.uniform(0, 0.5)),
                             interaction_scale=float(rng.uniform(0, 2)), seed=1000 + i)
        panel, _ = simulate(spec)
        K, L = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        pair = build_partitions(panel, PartitionSpec(K, L, LEAF20), seed=i)
        asg = assign_cells(panel, pair)
        _, eff, dec = twice_decomposition(panel, asg, shape=(pair.L, pair.K))
        a = eff.alpha[asg.worker_cell - 1]
        p = eff.psi[asg.firm_cell - 1]
        k = eff.kappa[asg.worker_cell - 1, asg.firm_cell - 1]
        worst_closure = max(worst_closure, abs(sum(dec.variances.values()) - dec.var_y) / dec.var_y)
        worst_ak = max(worst_ak, abs(np.mean((a - a.mean()) * (k - k.mean()))))
        worst_pk = max(worst_pk, abs(np.mean((p - p.mean()) * (k - k.mean()))))
    secs = time.time() - t0
    verdict(1, "five components close to Var(Y); kappa orthogonal to alpha and psi", {
        "closure<=1e-6": worst_closure <= 1e-6, "cov(alpha,kappa)<=1e-8": worst_ak <= 1e-8,
        "cov(psi,kappa)<=1e-8": worst_pk <= 1e-8, "runtime<=300s": secs <= 300},
        f"50 panels; closure {worst_closure:.1e}, cov {worst_ak:.1e}/{worst_pk:.1e}, {secs:.0f}s")


def test_criterion_02_ground_truth_recovery(verdict):
    t0 = time.time()
    panel, truth = simulate(SyntheticSpec(n_workers=4000, n_firms=200, noise_sd=0.0, interaction_scale=0.0, seed=1))
    _, _, dec = twice_decomposition(panel, (truth.row_worker_type + 1, truth.row_firm_type + 1), tol=1e-14)
    share_err = max(abs(dec.shares[c] - truth.shares[c]) for c in ("worker", "firm", "sorting"))
    interaction = dec.shares["interaction"]

    def estimated_sorting(rho):
        p, tr = simulate(SyntheticSpec(n_workers=12_000, n_firms=300, sorting_strength=rho, seed=2))
        pair = build_partitions(p, PartitionSpec(4, 4, LEAF20))
        _, _, d = twice_decomposition(p, assign_cells(p, pair), shape=(pair.L, pair.K))
        return len(p), d.shares["sorting"], tr.shares["sorting"]

    n0, s0, _ = estimated_sorting(0.0)
    n8, s8, t8 = estimated_sorting(0.8)
    secs = time.time() - t0
    verdict(2, "ground-truth recovery on synthetic panels", {
        "interaction<=1e-10": interaction <= 1e-10, "shares within 1e-8": share_err <= 1e-8,
        "rho=0 n>=50000": n0 >= 50_000, "rho=0 sorting within 0.01": abs(s0) <= 0.01,
        "rho=0.8 sorting within 0.03": abs(s8 - t8) <= 0.03, "runtime<=600s": secs <= 600},
        f"share err {share_err:.1e}; sorting {s0:.4f} at rho=0, {s8:.4f} vs {t8:.4f} at rho=0.8; {secs:.0f}s")


def test_criterion_03_projection_oracle(verdict):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        L, K = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        stats = random_stats(rng, L, K, float(rng.uniform(0.3, 1.0)))
        eff = project_additive(stats, tol=1e-13, max_iter=500_000)
        a, p = dense_wls_oracle(stats.pi, stats.mu)
        kappa = np.where(stats.pi > 0, stats.mu - stats.grand_mean - a[:, None] - p[None, :], np.nan)
        obs = stats.pi > 0
        worst = max(worst, np.abs(eff.alpha - a).max(), np.abs(eff.psi - p).max(),
                    np.abs(eff.kappa[obs] - kappa[obs]).max())
    verdict(3, "back-fitted projection matches dense weighted least squares", {"max err<=1e-8": worst <= 1e-8},
            f"100 instances, max coefficient error {worst:.1e}")


def test_criterion_04_akm_oracle_and_monte_carlo(verdict):
    rng = np.random.default_rng(404)
    worst, done = 0.0, 0
    while done < 100:
        panel = random_panel(rng, int(rng.integers(3, 40)), int(rng.integers(2, 10)), int(rng.integers(2, 6)), 0.5)
        panel, _ = largest_connected_set(panel)
        if len(panel) > 200 or panel.n_firms < 2:
            continue
        model = fit_akm(panel, None, tol=1e-13)
        th, ps, _, _ = dense_akm_oracle(panel, None)
        worst = max(worst, np.abs(model.psi - ps).max(), np.abs(model.theta - th).max())
        done += 1

    gaps = []
    for r in range(20):
        panel, truth = simulate(SyntheticSpec(n_workers=2000, n_firms=100, sorting_strength=0.0, interaction_scale=0.0,
                                              noise_sd=0.3, worker_effect_sd=0.3, seed=500 + r))
        conn, _ = largest_connected_set(panel)
        model = fit_akm(conn)
        # truth.firm_type follows the sorted firm ids of the generated panel
        ftype = truth.firm_type[np.searchsorted(panel.firm_levels, model.firm_ids)]
        gaps.append(model.psi[ftype == 3].mean() - model.psi[ftype == 0].mean())
    gaps = np.array(gaps)
    true_gap = truth.psi[3] - truth.psi[0]
    se = gaps.std(ddof=1) / np.sqrt(len(gaps))
    z = abs(gaps.mean() - true_gap) / se
    verdict(4, "AKM matches dense least squares; firm-effect gaps unbiased", {
        "oracle<=1e-8": worst <= 1e-8, "gap within 2 MC SE": z <= 2},
        f"oracle err {worst:.1e}; gap {gaps.mean():.4f} vs {true_gap:.4f}, {z:.2f} SE")


LEAKY = BoostConfig(learning_rate=0.3, max_rounds=60, early_stop_patience=100, min_leaf_size=5, max_leaves=63,
                    validation_fraction=0.0)


def test_criterion_05_crossfit_leakage(verdict):
    panel, truth = simulate(SyntheticSpec(n_workers=10_000, n_firms=500, n_years=5, noise_sd=0.05,
                                          worker_effect_sd=0.5, seed=5))
    plan = make_fold_plan(panel, 5, 1)
    ra, rb = plan.blocks_of(panel)
    clean = True
    for a, b in plan.cells:
        test = (ra == a) & (rb == b)
        train = training_mask(ra, rb, a, b)
        clean &= not np.isin(panel.worker_id[train], np.unique(panel.worker_id[test])).any()
        clean &= not np.isin(panel.firm_id[train], np.unique(panel.firm_id[test])).any()

    learner = BoostLearner(LEAKY)
    fitter = PartitionFitter(tree=LEAF20)
    fit = crossfit_predict(panel, plan, learner, partition_for=lambda sub, cell: fitter(sub, 4, 4))
    u = truth.noise
    corr_twice = float(np.corrcoef(fit.predictions, u)[0, 1])

    # leaky control: plain k-fold over rows, so each worker's other years sit in the training folds
    fold = np.random.default_rng(1).permutation(len(panel)) % 5
    naive = np.empty(len(panel))
    for k in range(5):
        model = fit_panel_model(panel.subset(np.flatnonzero(fold != k)), learner, Featurizer())
        naive[fold == k] = model.predict_panel(panel.subset(np.flatnonzero(fold == k)))
    corr_naive = float(np.corrcoef(naive, u)[0, 1])
    verdict(5, "two-way blocked cross-fitting is orthogonal to the noise", {
        "exclusion scan": bool(clean), "n=50000": len(panel) == 50_000,
        "|corr|<=0.02": abs(corr_twice) <= 0.02, "naive corr>=0.10": corr_naive >= 0.10},
        f"corr(oof,u) {corr_twice:+.4f}; naive k-fold {corr_naive:+.4f}")


def test_criterion_06_predictive_ordering(verdict):
    t0 = time.time()
    cfg = BoostConfig(learning_rate=0.2, max_rounds=150, early_stop_patience=20, min_leaf_size=20, max_leaves=31)
    ordered, gaps = [], []
    for s in range(5):
        panel, _ = simulate(SyntheticSpec(n_workers=3000, n_firms=150, n_years=5, interaction_scale=2.0,
                                          noise_sd=0.15, sorting_strength=0.3, seed=100 + s))
        panel, _ = largest_connected_set(panel)
        train, test = holdout_split(panel, 0.2, seed=s)
        pair = PartitionFitter(tree=LEAF20)(train, 4, 4)
        fit = crossfit_predict(train, make_fold_plan(train, 5, s), BoostLearner(cfg), pair)
        pred = np.mean([m.predict_panel(test) for m in fit.model_list()], axis=0)
        twice = r_squared(test.log_wage, pred)
        ols = {b.degree: b.test_r2 for b in fit_ols_baselines(train, test)}
        ordered.append(twice > ols[3] > ols[1] > ols[0])
        gaps.append(twice - max(ols.values()))
    secs = time.time() - t0
    verdict(6, "holdout R2 ordering TWICE > cubic > linear > simple OLS", {
        "ordering on 5 seeds": all(ordered), "gap>=0.03": min(gaps) >= 0.03, "runtime<=900s": secs <= 900},
        f"min gap {min(gaps):.3f}; {secs:.0f}s")


def test_criterion_07_tuning_sanity(verdict):
    panel, _ = simulate(SyntheticSpec(n_workers=1500, n_firms=100, n_years=4, worker_type_count=4,
                                      firm_type_count=4, interaction_scale=1.0, seed=77))
    panel, _ = largest_connected_set(panel)
    plan = make_fold_plan(panel, 3, 7)
    learner = BoostLearner(BoostConfig(learning_rate=0.3, max_rounds=40, early_stop_patience=10, min_leaf_size=20))
    res = tune_grid(panel, [2, 4, 8], [2, 4, 8], plan, learner, PartitionFitter(tree=LEAF20))
    table = {(r["K"], r["L"]): r["loss"] for r in res.table}
    verdict(7, "tuned loss no worse than the (2,2) corner; table complete", {
        "complete": len(table) == 9, "finite": all(np.isfinite(v) for v in table.values()),
        "L(K*,L*)<=L(2,2)": res.loss <= table[(2, 2)]},
        f"K*={res.K}, L*={res.L}, loss {res.loss:.5f} vs {table[(2, 2)]:.5f}")


EXPLAIN_CFG = BoostConfig(learning_rate=0.05, max_rounds=1000, min_leaf_size=50, max_leaves=15,
                          validation_fraction=0.0)


def test_criterion_08_explain_correctness(verdict):
    rng = np.random.default_rng(808)
    X = rng.normal(size=(2000, 3))
    linear = type("Linear", (), {"predict": staticmethod(lambda Z: 1.7 * Z[:, 0] - 0.4 * Z[:, 1] + Z[:, 2])})()
    a = ale(linear, X, CurveSpec("x0", grid_points=25))
    slope_err = np.abs(np.diff(a.value) - 1.7 * np.diff(a.grid)).max()
    mean_lin = abs((a.support * a.value).sum() / a.support.sum())

    n = 50_000
    X = rng.uniform(-2, 2, size=(n, 3))
    y = np.sin(X[:, 0]) + 0.25 * X[:, 1] ** 2 + 0.3 * X[:, 2] + 0.05 * rng.normal(size=n)
    model = fit_boosted(X, y, config=EXPLAIN_CFG)
    c = pdp(model, X[:20_000], CurveSpec("x0", grid_points=30))
    pdp_err = np.abs((c.value - c.value.mean()) - (np.sin(c.grid) - np.sin(c.grid).mean())).max()

    x0 = rng.uniform(-2, 2, n)
    x1 = np.clip(x0 + 0.4 * rng.normal(size=n), -3, 3)
    Xc = np.column_stack([x0, x1])
    yc = np.sin(x0) + 0.25 * x1 ** 2 + 0.05 * rng.normal(size=n)
    mc = fit_boosted(Xc, yc, config=EXPLAIN_CFG)
    ac = ale(mc, Xc, CurveSpec("x0", grid_points=30))
    truth = np.sin(ac.grid)
    truth -= (ac.support * truth).sum() / ac.support.sum()
    ale_err = np.abs(ac.value - truth).max()
    mean_fit = abs((ac.support * ac.value).sum() / ac.support.sum())
    verdict(8, "ALE and PDP recover known components", {
        "linear slope<=1e-8": slope_err <= 1e-8, "PDP additive<=0.02": pdp_err <= 0.02,
        "ALE mean 0 (1e-8)": max(mean_lin, mean_fit) <= 1e-8, "ALE correlated<=0.03": ale_err <= 0.03},
        f"slope err {slope_err:.1e}; PDP err {pdp_err:.4f}; correlated ALE err {ale_err:.4f}")


def test_criterion_09_concordance_and_robustness(verdict):
    one = eta_squared([1.0, 1.0, 4.0, 4.0, 9.0], ["a", "a", "b", "b", "c"])
    zero = eta_squared([1.0, -1.0, 1.0, -1.0], ["a", "a", "b", "b"])
    edges = one.value == 1.0 and zero.value == 0.0

    panel, _ = simulate(SyntheticSpec(n_workers=20_000, n_firms=200, covariate_noise=0.0, noise_sd=0.2,
                                      sorting_strength=0.3, interaction_scale=0.5, seed=9))
    panel, _ = largest_connected_set(panel)
    model = fit_akm(panel)
    pair = build_partitions(panel, PartitionSpec(4, 4, LEAF20))
    asg = assign_cells(panel, pair)
    nc = pair.K + 1
    tab = np.bincount(panel.firm_codes * nc + asg.firm_cell, minlength=panel.n_firms * nc).reshape(panel.n_firms, nc)
    eta = eta_squared(model.psi, tab.argmax(axis=1), np.bincount(panel.firm_codes)).value

    worker = build_worker_partition(panel, 4, LEAF20)
    psi_firm = {}
    for kind in ("mean", "median"):
        firm = build_firm_partition(panel, 4, FirmTarget(kind), LEAF20)
        cells = assign_cells(panel, PartitionPair(firm, worker))
        _, eff, _ = twice_decomposition(panel, cells, shape=(worker.n_cells, firm.n_cells))
        psi_firm[kind] = (np.bincount(panel.firm_codes, weights=eff.psi[cells.firm_cell - 1])
                          / np.bincount(panel.firm_codes))
    rho = spearman(psi_firm["mean"], psi_firm["median"])
    verdict(9, "concordance and firm-target robustness", {
        "eta2 edge cases": edges, "eta2(firm)>=0.95": eta >= 0.95, "spearman>=0.9": rho >= 0.9},
        f"eta2(firm) {eta:.4f}; mean vs median spearman {rho:.4f}")


PIPELINE = """[run]
out = out
seed = 31
B = 3
K_grid = 2, 4
L_grid = 2, 4

[simulate]
n_workers = 400
n_firms = 40
n_years = 4

[boost]
learning_rate = 0.3
max_rounds = 30
early_stop_patience = 10
min_leaf_size = 10

[tree]
min_leaf_size = 10

[explain]
features = age, tenure, log_revenue, education
grid_points = 8
"""


def test_criterion_10_determinism(verdict, tmp_path, monkeypatch):
    from twice.cli import COMMANDS, main
    cfg = tmp_path / "run.ini"
    cfg.write_text(PIPELINE, encoding="utf-8")
    outs = []
    for k, threads in enumerate(("1", "2")):
        monkeypatch.setenv("TWICE_THREADS", threads)
        out = tmp_path / f"out{k}"
        for cmd in COMMANDS:
            assert main([cmd, "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                     if p.suffix in (".csv", ".json", ".txt") and p.name != "manifest.json"})
    same = outs[0] == outs[1]
    verdict(10, "pipeline rerun with the same seed is byte-identical", {
        "identical": same, "artifacts present": len(outs[0]) >= 20},
        f"{len(outs[0])} artifacts compared")
