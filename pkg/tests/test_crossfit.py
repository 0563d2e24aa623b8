import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_panel, random_panel
from twice.boost import BoostConfig, BoostLearner
from twice.crossfit import (FoldPlan, MeanLearner, PartitionFitter, blocked_risk, crossfit_predict,
                            crossfit_risk, make_fold_plan, ordered_map, training_mask, tune_grid)
from twice.errors import EmptyGrid, EmptyTrainingCell, ValidationError
from twice.tree import TreeFitConfig

FAST = BoostLearner(BoostConfig(max_rounds=5, min_leaf_size=5, max_leaves=4, validation_fraction=0.0))


def test_ten_workers_two_per_block():
    panel = make_panel([f"w{i}" for i in range(10)], [f"f{i % 5}" for i in range(10)], [2000] * 10, np.zeros(10))
    plan = make_fold_plan(panel, B=5, seed=11)
    assert np.bincount(plan.worker_block, minlength=6)[1:].tolist() == [2] * 5
    assert np.bincount(plan.firm_block, minlength=6)[1:].tolist() == [1] * 5
    again = make_fold_plan(panel, B=5, seed=11)
    assert np.array_equal(again.worker_block, plan.worker_block)
    assert FoldPlan.from_dict(plan.to_dict()).to_dict() == plan.to_dict()


@given(st.integers(0, 10_000), st.integers(2, 7))
def test_block_sizes_balanced(seed, B):
    panel = random_panel(np.random.default_rng(seed), 23, 9, 2)
    plan = make_fold_plan(panel, B, seed)
    for blocks in (plan.worker_block, plan.firm_block):
        sizes = np.bincount(blocks, minlength=B + 1)[1:]
        assert sizes.max() - sizes.min() <= 1 and blocks.min() >= 1 and blocks.max() <= B


def test_exhaustive_exclusion_scan():
    rng = np.random.default_rng(0)
    panel = random_panel(rng, 120, 30, 5)
    plan = make_fold_plan(panel, 5, 3)
    ra, rb = plan.blocks_of(panel)
    for a, b in plan.cells:
        test = (ra == a) & (rb == b)
        train = training_mask(ra, rb, a, b)
        assert not set(panel.worker_id[train]) & set(panel.worker_id[test])
        assert not set(panel.firm_id[train]) & set(panel.firm_id[test])
        # nothing outside the strict complement is used
        assert train.sum() == ((ra != a) & (rb != b)).sum()


def test_models_never_see_held_out_ids():
    seen = []

    class Spy(MeanLearner):
        def __call__(self, X, y, categorical=None, groups=None, feature_names=None):
            seen.append(len(y))
            return super().__call__(X, y)

    rng = np.random.default_rng(1)
    panel = random_panel(rng, 40, 10, 3)
    plan = make_fold_plan(panel, 3, 0)
    ra, rb = plan.blocks_of(panel)
    fit = crossfit_predict(panel, plan, Spy())
    assert seen == [int(training_mask(ra, rb, a, b).sum()) for a, b in plan.cells]
    assert not np.isnan(fit.predictions).any()


def test_hand_computed_mean_learner():
    # four rows, B=2; each row's prediction is the mean over the strict complement of its cell
    panel = make_panel(["w1", "w2", "w3", "w4"], ["f1", "f2", "f1", "f2"], [2000] * 4, [1.0, 2.0, 3.0, 4.0])
    plan = FoldPlan(2, 0, np.array(["w1", "w2", "w3", "w4"]), np.array([1, 1, 2, 2]),
                    np.array(["f1", "f2"]), np.array([1, 2]))
    fit = crossfit_predict(panel, plan, MeanLearner())
    # cells: w1 (1,1) -> train rows with a!=1, b!=1 -> w4 (4.0); w2 (1,2) -> w3 (3.0); w3 (2,1) -> w2; w4 (2,2) -> w1
    assert fit.predictions.tolist() == [4.0, 3.0, 2.0, 1.0]
    risk = crossfit_risk(panel, fit, 2)
    assert risk.loss == pytest.approx(np.mean([9.0, 1.0, 1.0, 9.0]))


def test_empty_training_cell():
    panel = make_panel(["w1", "w2"], ["f1", "f2"], [2000] * 2, [1.0, 2.0])
    plan = FoldPlan(2, 0, np.array(["w1", "w2"]), np.array([1, 1]), np.array(["f1", "f2"]), np.array([1, 2]))
    with pytest.raises(EmptyTrainingCell):
        crossfit_predict(panel, plan, MeanLearner())


def test_blocked_risk_unweighted_cells():
    # cell (1,1) holds three rows with error 0, cell (2,2) one row with error 1: mean over cells is 0.5
    r = blocked_risk([0, 0, 0, 1], [0, 0, 0, 0], [1, 1, 1, 2], [1, 1, 1, 2], 2)
    assert r.loss == 0.5 and r.cells_used == 2
    assert r.weighted_loss == 0.25
    assert sorted(r.empty_cells) == [(1, 2), (2, 1)]
    assert np.isnan(r.cell_mse[0, 1])
    with pytest.raises(ValidationError):
        blocked_risk([1.0], [1.0, 2.0], [1], [1], 2)


def test_unknown_id_and_bad_B():
    panel = make_panel(["w1", "w2"], ["f1", "f2"], [2000] * 2, [1.0, 2.0])
    plan = make_fold_plan(panel, 2, 0)
    with pytest.raises(ValidationError):
        plan.blocks_of(make_panel(["w9"], ["f1"], [2000], [1.0]))
    with pytest.raises(ValidationError):
        make_fold_plan(panel, 1)


def test_row_order_invariance():
    rng = np.random.default_rng(5)
    panel = random_panel(rng, 60, 12, 3)
    plan = make_fold_plan(panel, 3, 2)
    a = crossfit_predict(panel, plan, FAST)
    perm = rng.permutation(len(panel))
    b = crossfit_predict(panel.subset(perm), plan, FAST)
    # same rows in each training set; only the tree's tie structure could differ, which it does not here
    assert np.allclose(b.predictions, a.predictions[perm])


def test_deterministic_and_threaded(monkeypatch):
    rng = np.random.default_rng(6)
    panel = random_panel(rng, 60, 12, 3)
    plan = make_fold_plan(panel, 3, 2)
    a = crossfit_predict(panel, plan, FAST)
    monkeypatch.setenv("TWICE_THREADS", "3")
    b = crossfit_predict(panel, plan, FAST)
    assert np.array_equal(a.predictions, b.predictions)
    assert ordered_map(lambda x: x * 2, range(5), workers=3) == [0, 2, 4, 6, 8]


def test_tune_grid_table_and_argmin():
    rng = np.random.default_rng(7)
    panel = random_panel(rng, 80, 16, 3)
    plan = make_fold_plan(panel, 2, 0)
    fitter = PartitionFitter(tree=TreeFitConfig(min_leaf_size=2))
    res = tune_grid(panel, [2, 1], [1, 2], plan, FAST, fitter)
    assert [(r["K"], r["L"]) for r in res.table] == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert all(np.isfinite(r["loss"]) for r in res.table)
    best = min(res.table, key=lambda r: (r["loss"], r["K"], r["L"]))
    assert (res.K, res.L, res.loss) == (best["K"], best["L"], best["loss"])
    assert res.to_csv().splitlines()[0] == "K,L,loss,cells_used" and len(res.to_csv().splitlines()) == 5
    one = tune_grid(panel, [1], [1], plan, FAST, fitter)
    assert (one.K, one.L) == (1, 1) and len(one.table) == 1
    with pytest.raises(EmptyGrid):
        tune_grid(panel, [], [1], plan, FAST)


def test_partition_features_in_design():
    rng = np.random.default_rng(8)
    panel = random_panel(rng, 80, 16, 3)
    plan = make_fold_plan(panel, 2, 0)
    pair = PartitionFitter(tree=TreeFitConfig(min_leaf_size=2))(panel, 2, 2)
    fit = crossfit_predict(panel, plan, FAST, pair)
    m = fit.model_list()[0]
    assert m.model.feature_names[-2:] == ["worker_cell", "firm_cell"]
    assert m.model.categorical[-2:].all()
