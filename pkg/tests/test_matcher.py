import numpy as np
import pytest

from cloudloc.formats import TrainingSet
from cloudloc.forest import DecisionTree, RandomForest
from cloudloc.matcher import MatchCandidate, match_descriptors, predict, train_matcher
from cloudloc.synth import descriptor_2d, descriptor_3d, signature

from _helpers import split_signature_set


class _Table:
    """Matcher stand-in returning a fixed probability table."""

    def __init__(self, P):
        self.P = np.asarray(P, float)
        self.feature_dim = 2

    def score_pairs(self, A, B):
        return self.P[A[:, 0].astype(int)][:, B[:, 0].astype(int)]


def _ids(n):
    return np.arange(n, dtype=float)[:, None]


def test_planted_pairs_found():
    X, y = split_signature_set(np.random.default_rng(0), 1500, 1500, n_landmarks=500)
    model = train_matcher(TrainingSet(X, y), grid=None, n_trees=15, seed=0)
    rng = np.random.default_rng(1)
    sig = signature(rng.uniform(0, np.pi / 2, (40, 16)))
    d2, d3 = descriptor_2d(sig, 0.05, rng), descriptor_3d(sig, 0.05, rng)
    perm = rng.permutation(40)
    cands = match_descriptors(model, d2, d3[perm], tau=0.5, top_k=1)
    correct = sum(perm[c.keypoint3d_id] == c.keypoint2d_id for c in cands)
    assert correct >= 30


def test_top_k_threshold_and_order():
    P = [[0.9, 0.7, 0.7, 0.1],
         [0.2, 0.3, 0.4, 0.45],
         [0.6, 0.6, 0.95, 0.6]]
    got = match_descriptors(_Table(P), _ids(3), _ids(4), tau=0.5, top_k=2)
    assert [(c.keypoint2d_id, c.keypoint3d_id) for c in got] == [(2, 2), (0, 0), (0, 1), (2, 0)]
    assert match_descriptors(_Table(P), _ids(3), _ids(4), tau=0.96) == []
    one = match_descriptors(_Table(P), _ids(3), _ids(4), tau=0.0, top_k=1)
    assert [(c.keypoint2d_id, c.keypoint3d_id) for c in one] == [(2, 2), (0, 0), (1, 3)]


def test_order_of_3d_set_does_not_matter():
    rng = np.random.default_rng(2)
    P = np.round(rng.uniform(0, 1, (6, 9)), 1)  # coarse values create ties
    base = match_descriptors(_Table(P), _ids(6), _ids(9), tau=0.3, top_k=3)
    perm = rng.permutation(9)
    shuffled = match_descriptors(_Table(P), _ids(6), _ids(9)[perm], tau=0.3, top_k=3, ids3d=perm)
    assert [c.to_dict() for c in base] == [c.to_dict() for c in shuffled]


def test_max_candidates_truncates_sorted_list():
    P = np.random.default_rng(3).uniform(0.5, 1, (5, 5))
    full = match_descriptors(_Table(P), _ids(5), _ids(5), top_k=3)
    assert match_descriptors(_Table(P), _ids(5), _ids(5), top_k=3, max_candidates=4) == full[:4]
    assert match_descriptors(_Table(P), _ids(5), _ids(5), top_k=3, max_candidates=100) == full


def test_progress_callback_and_errors():
    seen = []
    match_descriptors(_Table(np.ones((5, 2))), _ids(5), _ids(2), chunk=2, progress=lambda a, b: seen.append((a, b)))
    assert seen == [(2, 5), (4, 5), (5, 5)]
    with pytest.raises(ValueError):
        match_descriptors(_Table(np.ones((1, 1))), _ids(1), _ids(1), top_k=0)
    stump = DecisionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([1.0]))
    with pytest.raises(ValueError):
        match_descriptors(RandomForest([stump], 5), np.zeros((2, 3)), np.zeros((2, 3)))


def test_predict_single_vector():
    stump = DecisionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([0.25]))
    m = RandomForest([stump], 3)
    assert predict(m, [0, 0, 0]) == 0.25
    with pytest.raises(ValueError):
        predict(m, np.zeros((1, 3)))


def test_candidate_dict_round_trip():
    c = MatchCandidate(3, 7, 0.625)
    assert MatchCandidate.from_dict(c.to_dict()) == c


def test_train_matcher_records_meta():
    X, y = split_signature_set(np.random.default_rng(4), 200, 200)
    ts = TrainingSet(X, y, meta={"n_positive": 200, "n_negative": 200, "other": 1})
    m = train_matcher(ts, grid=[{"n_trees": 2}, {"n_trees": 4}])
    assert len(m.meta["grid_report"]) == 2
    assert m.meta["training_set"] == {"n_positive": 200, "n_negative": 200}
