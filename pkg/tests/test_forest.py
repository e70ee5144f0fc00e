import json

import numpy as np
import pytest

from cloudloc.forest import DecisionTree, RandomForest, accuracy, train_forest, validate_split

from _helpers import split_signature_set


def _traverse(tree: DecisionTree, x) -> float:
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return tree.value[node]


def _stump(feature, threshold, lo, hi):
    return DecisionTree(np.array([feature, -1, -1]), np.array([threshold, 0.0, 0.0]),
                        np.array([1, -1, -1]), np.array([2, -1, -1]), np.array([0.5, lo, hi]))


def test_axis_separable_data():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 5))
    y = (X[:, 2] > 0.1).astype(np.uint8)
    m = train_forest(X, y, n_trees=10, seed=0)
    Xt = rng.uniform(-1, 1, (400, 5))
    assert accuracy(m, Xt, Xt[:, 2] > 0.1) >= 0.97


def test_xor_needs_depth():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (1000, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(np.uint8)
    m = train_forest(X, y, n_trees=20, seed=1, features_per_split=2)
    Xt = rng.uniform(-1, 1, (500, 2))
    assert accuracy(m, Xt, (Xt[:, 0] > 0) ^ (Xt[:, 1] > 0)) >= 0.9


def test_training_is_deterministic_to_the_byte():
    X, y = split_signature_set(np.random.default_rng(2), 300, 300)
    a = train_forest(X, y, n_trees=5, seed=3)
    b = train_forest(X, y, n_trees=5, seed=3)
    assert json.dumps(a.to_dict()).encode() == json.dumps(b.to_dict()).encode()
    assert json.dumps(train_forest(X, y, n_trees=5, seed=4).to_dict()) != json.dumps(a.to_dict())


def test_predict_matches_traversal_oracle():
    X, y = split_signature_set(np.random.default_rng(5), 200, 200)
    m = train_forest(X, y, n_trees=4, seed=0)
    Xt, _ = split_signature_set(np.random.default_rng(6), 30, 30)
    want = np.array([np.mean([_traverse(t, x) for t in m.trees]) for x in Xt.astype(float)])
    assert np.allclose(m.predict_proba(Xt), want, rtol=0, atol=1e-15)


def test_handmade_forest_mean():
    one = RandomForest([_stump(0, 0.5, 0.0, 1.0)], 2)
    assert one.predict_proba([[0.5, 9]]).tolist() == [0.0]
    assert one.predict_proba([[0.6, 9]]).tolist() == [1.0]
    two = RandomForest([_stump(0, 0.5, 0.0, 1.0), _stump(1, 0.0, 0.2, 0.6)], 2)
    assert two.predict_proba([[0.6, -1.0]])[0] == pytest.approx(0.6)
    assert two.predict_proba([[0.0, 1.0]])[0] == pytest.approx(0.3)


def test_score_pairs_equals_concatenation():
    X, y = split_signature_set(np.random.default_rng(7), 200, 200)
    m = train_forest(X, y, n_trees=3, seed=0)
    A, B = X[:7, :128], X[10:19, 128:]
    grid = m.score_pairs(A, B)
    full = m.predict_proba(np.hstack([np.repeat(A, len(B), 0), np.tile(B, (len(A), 1))]))
    assert np.array_equal(grid.ravel(), full)


def test_probabilities_bounded_and_leaf_purity():
    X, y = split_signature_set(np.random.default_rng(8), 150, 150)
    m = train_forest(X, y, n_trees=6, seed=0, min_leaf=3)
    p = m.predict_proba(np.random.default_rng(9).uniform(0, 1, (200, 160)))
    assert np.all((p >= 0) & (p <= 1))
    for t in m.trees:
        assert t.depth() <= 20
        leaves = t.feature < 0
        assert np.all((t.value[leaves] >= 0) & (t.value[leaves] <= 1))


def test_json_round_trip(tmp_path):
    X, y = split_signature_set(np.random.default_rng(10), 100, 100)
    m = train_forest(X, y, n_trees=3, seed=0)
    m.save(tmp_path / "m.json")
    back = RandomForest.load(tmp_path / "m.json")
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    assert back.meta["seed"] == 0


def test_rejects_bad_training_data():
    X = np.zeros((10, 2))
    with pytest.raises(ValueError, match="single class"):
        train_forest(X, np.ones(10))
    with pytest.raises(ValueError):
        train_forest(X, np.full(10, 2))
    with pytest.raises(ValueError):
        RandomForest([], 2)


def test_validate_split_single_config_and_degenerate():
    X, y = split_signature_set(np.random.default_rng(11), 200, 200)
    best, model, report = validate_split(X, y, [{"n_trees": 3}], seed=0)
    assert best == {"n_trees": 3} and len(report) == 1
    assert len(model.trees) == 3 and "validation_accuracy" in model.meta
    with pytest.raises(ValueError, match="degenerate"):
        validate_split(X[:4], y[:4], [{"n_trees": 1}], fraction=0.15)


def test_validate_split_tie_prefers_fewer_trees():
    rng = np.random.default_rng(12)
    X = rng.uniform(-1, 1, (300, 3))
    y = (X[:, 0] > 0).astype(np.uint8)
    best, _, report = validate_split(X, y, [{"n_trees": 9}, {"n_trees": 3}], seed=0)
    accs = [r["val_accuracy"] for r in report]
    if accs[0] == accs[1]:
        assert best["n_trees"] == 3
    else:
        assert best == report[int(np.argmax(accs))]["params"]
