"""Random forest for binary classification (Gini splits, bootstrap, sqrt(dim) features).

Trees are stored as flat node arrays so that training, prediction and JSON
serialization share one layout. Internal nodes route ``x[feature] <= threshold``
to the left child; leaves carry the fraction of positive training samples.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

LEAF = -1


@njit(cache=True)
def _best_split(X, y, idx, features, min_leaf):
    n = idx.shape[0]
    total_pos = 0.0
    for i in range(n):
        total_pos += y[idx[i]]
    best_gain = -1.0
    best_f = -1
    best_thr = 0.0
    parent = 1.0 - (total_pos / n) ** 2 - (1.0 - total_pos / n) ** 2
    vals = np.empty(n)
    lab = np.empty(n)
    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(n):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        for i in range(n):
            lab[i] = y[idx[order[i]]]
        pos_left = 0.0
        for i in range(n - 1):
            pos_left += lab[i]
            nl = i + 1
            nr = n - nl
            v0 = vals[order[i]]
            v1 = vals[order[i + 1]]
            if v0 == v1 or nl < min_leaf or nr < min_leaf:
                continue
            pl = pos_left / nl
            pr = (total_pos - pos_left) / nr
            gl = 1.0 - pl * pl - (1.0 - pl) * (1.0 - pl)
            gr = 1.0 - pr * pr - (1.0 - pr) * (1.0 - pr)
            gain = parent - (nl * gl + nr * gr) / n
            if gain > best_gain:
                best_gain = gain
                best_f = f
                thr = 0.5 * (v0 + v1)
                # midpoint can round up to v1 when the two values are adjacent floats
                if thr >= v1:
                    thr = v0
                best_thr = thr
    return best_f, best_thr, best_gain


@njit(cache=True)
def _predict_flat(feature, threshold, left, right, value, roots, X):
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[i] = acc / roots.shape[0]
    return out


@njit(cache=True)
def _score_grid(feature, threshold, left, right, value, roots, A, B):
    """Forest probability for every concatenation ``A[i] ++ B[j]``."""
    na, nb = A.shape[0], B.shape[0]
    da = A.shape[1]
    out = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for t in range(roots.shape[0]):
                node = roots[t]
                while feature[node] >= 0:
                    f = feature[node]
                    x = A[i, f] if f < da else B[j, f - da]
                    if x <= threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                acc += value[node]
            out[i, j] = acc / roots.shape[0]
    return out


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=float))


def grow_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_depth: int,
              min_leaf: int, features_per_split: int, bootstrap: bool = True) -> DecisionTree:
    n, dim = X.shape
    idx = rng.integers(0, n, n) if bootstrap else np.arange(n)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), idx, 0)]
    while stack:
        node, ids, depth = stack.pop()
        frac = float(y[ids].mean())
        value[node] = frac
        if depth >= max_depth or frac in (0.0, 1.0) or len(ids) < 2 * min_leaf:
            continue
        feats = rng.choice(dim, size=min(features_per_split, dim), replace=False)
        f, thr, _ = _best_split(X, y, ids, feats.astype(np.int64), min_leaf)
        if f < 0:
            continue
        go_left = X[ids, f] <= thr
        l, r = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = int(f), float(thr), l, r
        stack.append((r, ids[~go_left], depth + 1))
        stack.append((l, ids[go_left], depth + 1))
    return DecisionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                        np.asarray(value))


@dataclass
class RandomForest:
    trees: list
    feature_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")
        self._flat = None

    def _flatten(self):
        if self._flat is None:
            offs = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
            feat = np.concatenate([t.feature for t in self.trees])
            thr = np.concatenate([t.threshold for t in self.trees])
            lft = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offs)])
            rgt = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offs)])
            val = np.concatenate([t.value for t in self.trees])
            self._flat = (feat, thr, lft, rgt, val, offs.astype(np.int64))
        return self._flat

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.feature_dim:
            raise ValueError(f"feature length {X.shape[1]} != {self.feature_dim}")
        return _predict_flat(*self._flatten(), np.ascontiguousarray(X))

    def score_pairs(self, A, B) -> np.ndarray:
        """Probabilities for all concatenations ``A[i] ++ B[j]`` without materialising them."""
        A = np.ascontiguousarray(np.atleast_2d(A), dtype=float)
        B = np.ascontiguousarray(np.atleast_2d(B), dtype=float)
        if A.shape[1] + B.shape[1] != self.feature_dim:
            raise ValueError(f"descriptor lengths {A.shape[1]}+{B.shape[1]} != {self.feature_dim}")
        return _score_grid(*self._flatten(), A, B)

    def to_dict(self) -> dict:
        return {"meta": dict(self.meta, feature_dim=self.feature_dim, n_trees=len(self.trees)),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        meta = dict(d["meta"])
        dim = int(meta.pop("feature_dim"))
        meta.pop("n_trees", None)
        trees = [DecisionTree.from_dict(t) for t in d["trees"]]
        for t in trees:
            if (t.feature >= dim).any():
                raise ValueError("tree references a feature beyond feature_dim")
        return cls(trees, dim, meta)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "RandomForest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train_forest(X, y, n_trees: int = 100, max_depth: int = 20, min_leaf: int = 5,
                 features_per_split: int = None, seed: int = 0) -> RandomForest:
    """Fit a forest; each tree gets its own RNG stream spawned from ``seed``."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, dim) with one label per row")
    npos = int((y == 1).sum())
    nneg = int((y == 0).sum())
    if npos + nneg != len(y):
        raise ValueError("labels must be 0 or 1")
    if npos == 0 or nneg == 0:
        raise ValueError("training data holds a single class")
    if min(npos, nneg) < min_leaf:
        raise ValueError(f"need at least min_leaf={min_leaf} samples of each class")
    dim = X.shape[1]
    mtry = features_per_split or int(math.ceil(math.sqrt(dim)))
    streams = np.random.SeedSequence(seed).spawn(n_trees)
    trees = [grow_tree(X, y, np.random.default_rng(s), max_depth, min_leaf, mtry) for s in streams]
    meta = {"seed": seed, "n_trees": n_trees, "max_depth": max_depth, "min_leaf": min_leaf,
            "features_per_split": mtry}
    return RandomForest(trees, dim, meta)


def accuracy(model: RandomForest, X, y, threshold: float = 0.5) -> float:
    return float(np.mean((model.predict_proba(X) >= threshold) == (np.asarray(y) == 1)))


DEFAULT_GRID = (
    {"n_trees": 10, "max_depth": 20},
    {"n_trees": 25, "max_depth": 20},
    {"n_trees": 50, "max_depth": 20},
)


def validate_split(X, y, grid=DEFAULT_GRID, fraction: float = 0.15, seed: int = 0, base: dict = None):
    """Pick hyperparameters on a held-out split, then retrain on all data.

    Ties in validation accuracy go to fewer trees, then shallower trees.
    Returns ``(best_params, model, report)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_val = int(round(fraction * len(y)))
    val, tr = perm[:n_val], perm[n_val:]
    if n_val == 0 or len(np.unique(y[val])) < 2 or len(np.unique(y[tr])) < 2:
        raise ValueError("degenerate validation split: both parts need both classes")
    base = dict(base or {})
    report = []
    for params in grid:
        p = {**base, **params}
        model = train_forest(X[tr], y[tr], seed=seed, **p)
        acc = accuracy(model, X[val], y[val])
        report.append({"params": p, "val_accuracy": acc})
        logger.info("grid %s -> validation accuracy %.4f", p, acc)
    defaults = {"n_trees": 100, "max_depth": 20}
    best = min(report, key=lambda r: (-r["val_accuracy"],
                                      r["params"].get("n_trees", defaults["n_trees"]),
                                      r["params"].get("max_depth", defaults["max_depth"])))
    model = train_forest(X, y, seed=seed, **best["params"])
    model.meta["validation_accuracy"] = best["val_accuracy"]
    model.meta["validation_fraction"] = fraction
    return best["params"], model, report
