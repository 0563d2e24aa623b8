import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from twice.errors import AllWeightsZero, EmptyInput, SchemaMismatch, ValidationError
from twice.tree import RegressionTree, TreeFitConfig, fit_tree, leaf_of, predict


def sse(y, w):
    if w.sum() == 0:
        return 0.0
    m = (w * y).sum() / w.sum()
    return float((w * (y - m) ** 2).sum())


def brute_force_best_gain(X, y, w, categorical, min_leaf):
    """Exhaustive scan: every midpoint threshold of every numeric column, every binary level subset."""
    parent = sse(y, w)
    best = 0.0
    for j in range(X.shape[1]):
        x = X[:, j]
        if categorical[j]:
            levels = np.unique(x)
            for r in range(1, len(levels)):
                for left in itertools.combinations(levels, r):
                    m = np.isin(x, left)
                    if w[m].sum() >= min_leaf and w[~m].sum() >= min_leaf:
                        best = max(best, parent - sse(y[m], w[m]) - sse(y[~m], w[~m]))
        else:
            u = np.unique(x)
            for t in 0.5 * (u[1:] + u[:-1]):
                m = x < t
                if w[m].sum() >= min_leaf and w[~m].sum() >= min_leaf:
                    best = max(best, parent - sse(y[m], w[m]) - sse(y[~m], w[~m]))
    return best


def test_constant_targets_single_leaf():
    X = np.random.default_rng(0).normal(size=(50, 3))
    tree = fit_tree(X, np.full(50, 2.5), config=TreeFitConfig(min_leaf_size=1))
    assert tree.leaf_count == 1
    assert predict(tree, [100.0, -3.0, 0.0]) == 2.5


def test_step_function():
    x = np.linspace(-1, 1, 40)
    y = (x >= 0).astype(float)
    tree = fit_tree(x[:, None], y, config=TreeFitConfig(max_leaves=2, min_leaf_size=1))
    assert tree.leaf_count == 2
    assert abs(tree.threshold[0]) < 0.06
    assert predict(tree, [-5.0]) == 0.0 and predict(tree, [5.0]) == 1.0
    assert sorted(tree.value[tree.is_leaf]) == [0.0, 1.0]


@pytest.mark.parametrize("seed", range(5))
def test_first_split_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 200
    X = np.column_stack([rng.normal(size=n), rng.integers(0, 20, n), rng.integers(0, 5, n), rng.uniform(size=n)])
    y = np.sin(3 * X[:, 0]) + 0.3 * (X[:, 2] % 2) + 0.2 * rng.normal(size=n)
    w = rng.uniform(0.5, 2.0, n)
    cat = np.array([False, False, True, False])
    tree = fit_tree(X, y, w, TreeFitConfig(max_leaves=4, min_leaf_size=5), cat)
    oracle = brute_force_best_gain(X, y, w, cat, 5)
    assert tree.gain[0] == pytest.approx(oracle, rel=1e-9, abs=1e-12)


def test_categorical_split_and_unseen_level():
    # levels 0,1 low; 2 high; level 0 heaviest so the left (low) child is the heavier one
    x = np.array([0] * 30 + [1] * 10 + [2] * 10, dtype=float)
    y = np.where(x == 2, 5.0, 1.0)
    tree = fit_tree(x[:, None], y, config=TreeFitConfig(max_leaves=2, min_leaf_size=1), categorical=[True])
    assert tree.left_levels[0] == (0, 1) and tree.right_levels[0] == (2,)
    assert tree.default_left[0]
    assert predict(tree, [7.0]) == 1.0          # unseen level routes to the heavier child
    assert predict(tree, [2.0]) == 5.0


def test_leaf_values_are_weighted_means_and_budget():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(500, 4))
    y = X[:, 0] * 2 + np.where(X[:, 1] > 0, 1.0, -1.0) + rng.normal(size=500) * 0.1
    w = rng.uniform(0, 3, 500)
    cfg = TreeFitConfig(max_leaves=7, min_leaf_size=15)
    tree = fit_tree(X, y, w, cfg)
    leaves = tree.apply(X)
    assert tree.leaf_count <= 7
    for leaf in np.unique(leaves):
        m = leaves == leaf
        assert tree.value[leaf] == pytest.approx((w[m] * y[m]).sum() / w[m].sum(), abs=1e-10)
        assert w[m].sum() >= 15 - 1e-9


@given(st.integers(0, 10_000), st.integers(1, 12), st.floats(1, 20))
def test_tree_invariants_property(seed, budget, min_leaf):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    X = np.column_stack([rng.normal(size=n), rng.integers(0, 4, n)])
    y = rng.normal(size=n) + X[:, 1]
    cfg = TreeFitConfig(max_leaves=budget, min_leaf_size=min_leaf)
    tree = fit_tree(X, y, None, cfg, [False, True])
    assert tree.leaf_count <= budget
    internal = ~tree.is_leaf
    assert np.all(tree.left[internal] >= 0) and np.all(tree.right[internal] >= 0)
    leaves = tree.apply(X)
    assert np.all(tree.is_leaf[leaves])
    counts = np.bincount(leaves)
    if tree.leaf_count > 1:
        assert counts[counts > 0].min() >= min_leaf
    assert sorted(tree.leaves_in_order()) == sorted(np.flatnonzero(tree.is_leaf).tolist())


@given(st.integers(0, 10_000))
def test_sse_nonincreasing_in_budget(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(150, 3))
    y = np.abs(X[:, 0]) + X[:, 1] * X[:, 2] + rng.normal(size=150) * 0.3
    prev = np.inf
    for k in range(1, 10):
        tree = fit_tree(X, y, config=TreeFitConfig(max_leaves=k, min_leaf_size=3))
        err = float(((y - tree.predict(X)) ** 2).sum())
        assert err <= prev + 1e-9
        prev = err


def test_refit_bit_identical_and_json_roundtrip():
    rng = np.random.default_rng(8)
    X = np.column_stack([rng.normal(size=300), rng.integers(0, 6, 300)])
    y = X[:, 0] + (X[:, 1] == 3) + rng.normal(size=300) * 0.2
    a = fit_tree(X, y, config=TreeFitConfig(max_leaves=9, min_leaf_size=4), categorical=[False, True],
                 feature_names=["x", "c"])
    b = fit_tree(X, y, config=TreeFitConfig(max_leaves=9, min_leaf_size=4), categorical=[False, True],
                 feature_names=["x", "c"])
    assert a.to_json() == b.to_json()
    c = RegressionTree.from_json(a.to_json())
    assert c.to_json() == a.to_json()
    assert np.array_equal(c.predict(X), a.predict(X))
    assert leaf_of(c, X[0]) == leaf_of(a, X[0])


def test_depth_limit():
    x = np.arange(64, dtype=float)[:, None]
    tree = fit_tree(x, x[:, 0], config=TreeFitConfig(max_leaves=64, min_leaf_size=1, max_depth=2))
    assert tree.leaf_count == 4


def test_errors():
    with pytest.raises(EmptyInput):
        fit_tree(np.zeros((0, 2)), [])
    with pytest.raises(AllWeightsZero):
        fit_tree(np.zeros((3, 1)), [1, 2, 3], [0, 0, 0])
    with pytest.raises(ValidationError):
        TreeFitConfig(max_leaves=0)
    with pytest.raises(ValidationError):
        TreeFitConfig(min_leaf_size=0)
    tree = fit_tree(np.arange(10.0)[:, None], np.arange(10.0), config=TreeFitConfig(min_leaf_size=1))
    with pytest.raises(SchemaMismatch):
        tree.predict(np.zeros((2, 3)))


def test_paths_cover_each_row_once():
    rng = np.random.default_rng(2)
    X = np.column_stack([rng.normal(size=200), rng.integers(0, 4, 200)])
    y = X[:, 0] + X[:, 1]
    tree = fit_tree(X, y, config=TreeFitConfig(max_leaves=6, min_leaf_size=5), categorical=[False, True])
    paths = tree.paths()
    hits = np.zeros(len(X), dtype=int)
    for leaf, conds in paths.items():
        ok = np.ones(len(X), dtype=bool)
        for f, op, val in conds:
            if op == "<":
                ok &= X[:, f] < val
            elif op == ">=":
                ok &= X[:, f] >= val
            else:
                ok &= np.isin(X[:, f], val)
        hits += ok
        assert np.all(tree.apply(X[ok]) == leaf)
    assert np.all(hits == 1)
