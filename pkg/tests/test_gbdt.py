import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbdt.errors import NumericalDomainError, ValidationError
from cbdt.gbdt import (GradHess, RegressionTree, TreeEnsemble, TreeParams, apply_tree, bin_features,
                       fit_gbdt, fit_tree, leaf_weight, predict_tree, split_gain, squared_grad_hess)
from oracles import check_tree_against_bruteforce, gain


def test_split_gain_examples():
    assert split_gain(2, 1, -2, 1, 0, 0) == pytest.approx(4.0)
    assert split_gain(0, 3, 0, 2, 1.0, 0.7) == pytest.approx(-0.7)
    # 0.5 * (9/3 + 1/3 - 16/5) - 0.5
    assert split_gain(3, 2, 1, 2, 1, 0.5) == pytest.approx(-13 / 30, abs=1e-12)


def test_split_gain_rejects_nonpositive_denominator():
    with pytest.raises(NumericalDomainError):
        split_gain(1, 0, 1, 1, 0, 0)


def test_leaf_weight_examples():
    assert leaf_weight(4, 2, 0) == -2.0
    assert leaf_weight(0, 5, 1) == 0.0
    assert leaf_weight(3, 1, 2) == -1.0
    with pytest.raises(NumericalDomainError):
        leaf_weight(1, 0, 0)


@given(st.floats(-50, 50), st.floats(0.01, 20), st.floats(-50, 50), st.floats(0.01, 20),
       st.floats(0, 5), st.floats(0, 5))
def test_split_gain_matches_reference(GL, HL, GR, HR, lam, gamma):
    assert split_gain(GL, HL, GR, HR, lam, gamma) == pytest.approx(gain(GL, HL, GR, HR, lam, gamma),
                                                                  rel=1e-12, abs=1e-12)


def test_gradhess_validation():
    with pytest.raises(ValidationError):
        GradHess(np.zeros(3), np.zeros(2))
    with pytest.raises(NumericalDomainError):
        GradHess(np.zeros(2), np.array([1.0, -1.0]))


def _random_problem(seed, n=120, d=4):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = np.sin(X[:, 0]) + (X[:, 1] > 0.3) + 0.2 * rng.standard_normal(n)
    return X, squared_grad_hess(np.zeros(n), y)


@pytest.mark.parametrize("seed", range(5))
def test_exact_tree_matches_bruteforce(seed):
    X, gh = _random_problem(seed)
    params = TreeParams(max_depth=3, min_samples_leaf=4, split_reg_lambda=0.5, leaf_penalty_gamma=0.1)
    tree = fit_tree(X, gh, params)
    assert check_tree_against_bruteforce(tree, X, gh.g, gh.h, params) == []


def test_step_gradients_split_at_step():
    x = np.arange(20, dtype=float)
    y = np.where(x > 11, 5.0, -1.0)
    tree = fit_tree(x[:, None], squared_grad_hess(np.zeros(20), y), TreeParams(max_depth=1, min_samples_leaf=1))
    assert tree.feature[0] == 0 and tree.threshold[0] == 11.5


def test_zero_gradients_give_single_zero_leaf():
    X = np.random.default_rng(0).standard_normal((30, 3))
    tree = fit_tree(X, GradHess(np.zeros(30), np.full(30, 2.0)), TreeParams())
    assert tree.n_nodes == 1 and tree.value[0] == 0.0


def test_constant_features_give_single_leaf():
    X = np.ones((30, 2))
    y = np.arange(30.0)
    tree = fit_tree(X, squared_grad_hess(np.zeros(30), y), TreeParams())
    assert tree.n_nodes == 1
    assert tree.value[0] == pytest.approx(y.mean() * 60 / 61)


def test_too_few_rows():
    with pytest.raises(ValidationError):
        fit_tree(np.zeros((5, 1)), GradHess(np.zeros(5), np.ones(5)), TreeParams(min_samples_leaf=3))


@pytest.mark.parametrize("seed", range(3))
def test_histogram_reproduces_exact_on_few_distinct_values(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 40, (300, 4)).astype(float) / 7.0
    gh = squared_grad_hess(np.zeros(300), X[:, 0] * X[:, 1] + rng.standard_normal(300))
    exact = fit_tree(X, gh, TreeParams(max_depth=4, mode="exact"))
    hist = fit_tree(X, gh, TreeParams(max_depth=4, mode="histogram", max_bins=255))
    for name in ("feature", "threshold", "left", "right", "value"):
        assert np.array_equal(getattr(exact, name), getattr(hist, name)), name


def test_histogram_mode_caps_bins():
    X = np.random.default_rng(1).standard_normal((500, 2))
    b = bin_features(X, "histogram", 16)
    assert b.n_bins.max() <= 16
    assert b.codes.max() < 16


def test_boundary_value_routes_left():
    x = np.arange(10, dtype=float)
    y = np.where(x > 4, 1.0, 0.0)
    tree = fit_tree(x[:, None], squared_grad_hess(np.zeros(10), y), TreeParams(max_depth=1, min_samples_leaf=1))
    thr = tree.threshold[0]
    left_value = tree.value[tree.left[0]]
    assert predict_tree(tree, np.array([[thr]]))[0] == left_value
    assert predict_tree(tree, np.array([[np.nextafter(thr, np.inf)]]))[0] == tree.value[tree.right[0]]


def test_training_rows_land_in_their_leaves():
    X, gh = _random_problem(7)
    params = TreeParams(max_depth=3, min_samples_leaf=4)
    tree = fit_tree(X, gh, params)
    leaves = apply_tree(tree, X)
    for leaf in np.unique(leaves):
        rows = leaves == leaf
        assert tree.n_samples[leaf] == rows.sum()
        assert abs(tree.value[leaf] - leaf_weight(gh.g[rows].sum(), gh.h[rows].sum(), params.split_reg_lambda)) < 1e-10


def test_single_leaf_tree_predicts_constant():
    tree = RegressionTree.from_dict({"n_features": 2, "nodes": [{"id": 0, "leaf": True, "value": 3.0}]})
    assert np.all(predict_tree(tree, np.zeros((4, 2))) == 3.0)


def test_dimension_mismatch():
    X, gh = _random_problem(0)
    tree = fit_tree(X, gh, TreeParams())
    with pytest.raises(ValidationError):
        predict_tree(tree, X[:, :2])


def test_tree_round_trip():
    X, gh = _random_problem(3)
    tree = fit_tree(X, gh, TreeParams())
    back = RegressionTree.from_dict(tree.to_dict())
    assert back.structure() == tree.structure()
    assert np.array_equal(predict_tree(back, X), predict_tree(tree, X))


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 8))
def test_internal_gains_positive_and_paths_consistent(seed, depth, min_leaf):
    rng = np.random.default_rng(seed)
    n = 60
    X = rng.standard_normal((n, 3))
    gh = GradHess(rng.standard_normal(n), rng.uniform(0.1, 2.0, n))
    tree = fit_tree(X, gh, TreeParams(max_depth=depth, min_samples_leaf=min_leaf))
    internal = tree.feature >= 0
    assert np.all(tree.gain[internal] > 0)
    assert np.all(np.isfinite(tree.value))

    def walk(node, lo, hi):
        f = tree.feature[node]
        if f < 0:
            assert np.all(lo < hi)
            return
        thr = tree.threshold[node]
        assert lo[f] < thr < hi[f]
        walk(tree.left[node], lo, np.where(np.arange(3) == f, np.minimum(hi, thr), hi))
        walk(tree.right[node], np.where(np.arange(3) == f, np.maximum(lo, thr), lo), hi)

    walk(0, np.full(3, -np.inf), np.full(3, np.inf))


def test_fit_gbdt_reduces_squared_error():
    X, _ = _random_problem(11, n=300)
    y = np.sin(X[:, 0]) + X[:, 1] ** 2
    ens = fit_gbdt(X, y, 50, 0.3, TreeParams())
    assert np.mean((ens.predict(X) - y) ** 2) < 0.2 * np.var(y)
    back = TreeEnsemble.from_dict(ens.to_dict())
    assert np.array_equal(back.predict(X), ens.predict(X))


def test_fit_gbdt_logistic_outputs_probabilities():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((400, 2))
    t = (rng.random(400) < 1 / (1 + np.exp(-2 * X[:, 0]))).astype(float)
    p = fit_gbdt(X, t, 30, 0.1, TreeParams(), loss="logistic").predict(X)
    assert np.all((p > 0) & (p < 1))
    assert np.corrcoef(p, X[:, 0])[0, 1] > 0.8
