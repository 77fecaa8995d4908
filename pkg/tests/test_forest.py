import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import cart_oracle, same_tree, tree_preorder
from ndtrange.factors import FEATURE_COLUMNS, FactorVector
from ndtrange.forest import (MODEL_COLUMNS, Dataset, ForestModel, ForestParams, Tree, column_medians, dumps_model,
                             evaluate_model, load_model, loads_model, predict_error, save_model, train_forest)

ORACLE = ForestParams(n_trees=1, max_depth=None, min_leaf=1, features_per_split=None, bootstrap=False)


def small(X, y, columns=("a", "b")):
    n = len(y)
    return Dataset(np.asarray(X, float), y, np.arange(n), np.full(n, 10.0), columns)


def random_data(seed, n=60, d=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.abs(2 * X[:, 0] + np.sin(3 * X[:, 1]) + rng.normal(scale=0.1, size=n)) + 1
    return Dataset(X, y, np.arange(n) // 3, np.full(n, 20.0), tuple("abcd"[:d]))


def fv(**kw):
    base = dict(range=10.0, feature_count=10, d1_count=2, d2_count=5, d3_count=3, d1_ratio=0.2, d2_ratio=0.5,
                d3_ratio=0.3, occupancy_ratio=0.1, normal_entropy=2.0, r_average=5.0, score_entropy=4.0)
    base.update(kw)
    return FactorVector(**base)


@pytest.mark.parametrize("seed", range(6))
def test_single_tree_equals_exhaustive_cart(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.uniform(0, 10, size=(12, 2)), 2)
    y = np.round(rng.uniform(0, 20, size=12), 3)
    data = small(X, y)
    model = train_forest(data, ForestParams(n_trees=1, max_depth=None, min_leaf=1, features_per_split=2,
                                            bootstrap=False))
    expected = cart_oracle(data.X, list(data.y))
    assert same_tree(tree_preorder(model.trees[0]), expected)


def test_exhaustive_cart_with_depth_limit():
    rng = np.random.default_rng(10)
    X = rng.uniform(size=(12, 2))
    y = rng.uniform(size=12)
    data = small(X, y)
    model = train_forest(data, ForestParams(n_trees=1, max_depth=2, min_leaf=1, features_per_split=2, bootstrap=False))
    assert same_tree(tree_preorder(model.trees[0]), cart_oracle(data.X, list(data.y), max_depth=2))


@pytest.mark.parametrize("c", [0.0, 3.7, 1e-17, 123456.789])
def test_constant_target_is_exact(c):
    data = random_data(0)
    const = Dataset(data.X, np.full(len(data), c), data.waypoint_ids, data.ranges, data.columns)
    model = train_forest(const, ForestParams(n_trees=25, seed=3))
    rng = np.random.default_rng(1)
    assert np.all(model.predict_matrix(rng.normal(size=(50, 4)) * 5) == c)


def test_depth_zero_predicts_bootstrap_means():
    data = random_data(1, n=200)
    model = train_forest(data, ForestParams(n_trees=200, max_depth=0))
    assert all(len(t) == 1 for t in model.trees)
    pred = model.predict_matrix(data.X[:3])
    assert np.all(pred == pred[0])
    se = data.y.std() / math.sqrt(len(data))
    assert abs(pred[0] - data.y.mean()) < 4 * se


def test_memorizing_tree():
    data = random_data(2)
    model = train_forest(data, ORACLE)
    assert np.array_equal(model.predict_matrix(data.X), data.y)


def test_hand_built_two_leaf_tree():
    tree = Tree(feature=np.array([1, -1, -1]), threshold=np.array([0.5, 0.0, 0.0]), left=np.array([1, -1, -1]),
                right=np.array([2, -1, -1]), value=np.array([5.0, 2.0, 8.0]), n_samples=np.array([4, 2, 2]))
    model = ForestModel((tree,), ForestParams(n_trees=1), 10.0, ("a", "b"), np.zeros(2))
    assert predict_error(model, [9.0, 0.2], columns=("a", "b")) == 2.0
    assert predict_error(model, [9.0, 0.5], columns=("a", "b")) == 2.0  # boundary goes left
    assert predict_error(model, [-9.0, 0.7], columns=("a", "b")) == 8.0


def test_feature_order_mismatch():
    data = random_data(3)
    model = train_forest(data, ForestParams(n_trees=3))
    with pytest.raises(ValueError):
        predict_error(model, [0, 0, 0, 0], columns=("b", "a", "c", "d"))
    with pytest.raises(ValueError):
        predict_error(model, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        predict_error(model, fv())  # model was trained on other columns


def test_empty_dataset_and_holdout():
    data = random_data(3)
    with pytest.raises(ValueError):
        train_forest(data.subset(np.zeros(len(data), bool)))
    model = train_forest(data, ForestParams(n_trees=2))
    with pytest.raises(ValueError):
        evaluate_model(model, data.subset(np.zeros(len(data), bool)))


def test_evaluate_examples():
    data = random_data(4)
    model = train_forest(data, ORACLE)
    assert evaluate_model(model, data) == (0.0, 0.0)
    c = 5.0
    X = np.zeros((2, 2))
    const_model = train_forest(small(X, [c, c]), ORACLE)
    assert evaluate_model(const_model, small(np.ones((2, 2)), [c - 1, c + 1])) == (1.0, 1.0)


def test_evaluate_matches_recompute_loop():
    train = random_data(5)
    hold = random_data(6, n=30)
    model = train_forest(train, ForestParams(n_trees=10))
    preds = [predict_error(model, row, columns=hold.columns) for row in hold.X]
    mae = sum(abs(p - t) for p, t in zip(preds, hold.y)) / len(preds)
    mse = sum((p - t) ** 2 for p, t in zip(preds, hold.y)) / len(preds)
    got = evaluate_model(model, hold)
    assert got[0] == pytest.approx(mae, rel=1e-12)
    assert got[1] == pytest.approx(mse, rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_predictions_within_target_range(seed):
    data = random_data(seed, n=40)
    model = train_forest(data, ForestParams(n_trees=10, seed=seed))
    rng = np.random.default_rng(seed)
    p = model.predict_matrix(rng.normal(size=(100, 4)) * 3)
    assert np.all(p >= data.y.min()) and np.all(p <= data.y.max())


def test_tree_structure_invariants():
    data = random_data(7, n=120)
    params = ForestParams(n_trees=5, min_leaf=3, max_depth=None)
    model = train_forest(data, params)
    for t in model.trees:
        for i in range(len(t)):
            if t.feature[i] >= 0:
                assert t.n_samples[t.left[i]] + t.n_samples[t.right[i]] == t.n_samples[i]
            else:
                assert t.n_samples[i] >= params.min_leaf


def test_seed_determinism_bitwise():
    data = random_data(8)
    a = dumps_model(train_forest(data, ForestParams(n_trees=20, seed=4)))
    b = dumps_model(train_forest(data, ForestParams(n_trees=20, seed=4)))
    c = dumps_model(train_forest(data, ForestParams(n_trees=20, seed=5)))
    assert a == b
    assert a != c


def test_row_permutation_invariance():
    data = random_data(9)
    perm = np.random.default_rng(0).permutation(len(data))
    shuffled = Dataset(data.X[perm], data.y[perm], data.waypoint_ids[perm], data.ranges[perm], data.columns)
    params = ForestParams(n_trees=15, seed=2)
    assert dumps_model(train_forest(data, params)) == dumps_model(train_forest(shuffled, params))


def test_missing_values_imputed_with_flag():
    vectors = [fv(r_average=float(i), normal_entropy=float(i % 3)) for i in range(1, 10)]
    vectors += [fv(feature_count=0, r_average=None)] * 3
    rows = [(v, float(i), i, 10.0) for i, v in enumerate(vectors)]
    data = Dataset.from_rows(rows)
    model = train_forest(data, ORACLE)
    assert model.columns == MODEL_COLUMNS
    j = FEATURE_COLUMNS.index("r_average")
    assert model.medians[j] == 5.0
    Z = model.design(data.X)
    missing = np.isnan(data.X[:, j])
    assert np.all(Z[missing, j] == 5.0)
    assert np.array_equal(Z[:, -1], missing.astype(float))
    assert not np.isnan(Z).any()
    assert predict_error(model, fv(feature_count=0, r_average=None)) >= 0.0


def test_column_medians_all_missing():
    X = np.array([[np.nan, 1.0], [np.nan, 3.0]])
    assert np.array_equal(column_medians(X), [0.0, 2.0])


def test_dataset_validation():
    with pytest.raises(ValueError):
        small(np.zeros((2, 2)), [1.0, -1.0])
    with pytest.raises(ValueError):
        small(np.zeros((2, 2)), [1.0, np.nan])
    with pytest.raises(ValueError):
        small(np.zeros((2, 3)), [1.0, 2.0])
    with pytest.raises(ValueError):
        small(np.array([[np.inf, 0.0]]), [1.0])


def test_invalid_params():
    data = random_data(0)
    for p in (ForestParams(n_trees=0), ForestParams(min_leaf=0), ForestParams(max_depth=-1),
              ForestParams(features_per_split=0)):
        with pytest.raises(ValueError):
            train_forest(data, p)


def test_model_file_round_trip(tmp_path):
    data = random_data(11)
    model = train_forest(data, ForestParams(n_trees=7, seed=9, max_depth=None))
    save_model(tmp_path / "m.txt", model)
    back = load_model(tmp_path / "m.txt")
    assert dumps_model(back) == dumps_model(model)
    X = np.random.default_rng(0).normal(size=(40, 4))
    assert np.array_equal(back.predict_matrix(X), model.predict_matrix(X))


def test_model_file_errors():
    with pytest.raises(ValueError):
        loads_model("# something else\n")
    text = dumps_model(train_forest(random_data(0), ForestParams(n_trees=1)))
    lines = text.splitlines()
    with pytest.raises(ValueError):
        loads_model("\n".join(lines[:-1]) + "\n")
