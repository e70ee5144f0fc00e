"""Descriptor matcher: a random forest over concatenated 2D and 3D descriptors."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .formats import TrainingSet
from .forest import DEFAULT_GRID, RandomForest, train_forest, validate_split

logger = logging.getLogger(__name__)

DescriptorMatcher = RandomForest


@dataclass(frozen=True)
class MatchCandidate:
    keypoint2d_id: int
    keypoint3d_id: int
    probability: float

    def to_dict(self) -> dict:
        return {"keypoint2d_id": self.keypoint2d_id, "keypoint3d_id": self.keypoint3d_id,
                "probability": self.probability}

    @classmethod
    def from_dict(cls, d: dict) -> "MatchCandidate":
        return cls(int(d["keypoint2d_id"]), int(d["keypoint3d_id"]), float(d["probability"]))


def predict(matcher: DescriptorMatcher, feature) -> float:
    """Match probability of one concatenated descriptor."""
    x = np.asarray(feature, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict takes a single feature vector")
    return float(matcher.predict_proba(x[None, :])[0])


def train_matcher(data: TrainingSet, grid: Optional[Sequence[dict]] = DEFAULT_GRID,
                  fraction: float = 0.15, seed: int = 0, **params) -> DescriptorMatcher:
    """Fit the matcher; with a grid, hyperparameters are chosen on a held-out split first."""
    if grid:
        best, model, report = validate_split(data.features, data.labels, grid, fraction, seed, base=params)
        model.meta["grid_report"] = report
    else:
        model = train_forest(data.features, data.labels, seed=seed, **params)
    if data.meta:
        model.meta["training_set"] = {k: data.meta[k] for k in ("n_positive", "n_negative", "mining")
                                      if k in data.meta}
    return model


def match_descriptors(matcher: DescriptorMatcher, desc2d, desc3d, tau: float = 0.5, top_k: int = 3,
                      ids2d=None, ids3d=None, chunk: int = 64,
                      progress: Optional[Callable[[int, int], None]] = None,
                      max_candidates: Optional[int] = None) -> list[MatchCandidate]:
    """Score every 2D/3D pair and keep, per 2D keypoint, the ``top_k`` 3D keypoints above ``tau``.

    Ties in probability are broken by the smaller 3D id, so the result does
    not depend on the order of ``desc3d``. The output is sorted by descending
    probability (then 2D id, then 3D id). ``max_candidates`` truncates that
    sorted list; below the cap the output is unchanged. ``progress`` is called
    as ``progress(done_rows, total_rows)`` after each chunk of 2D rows.
    """
    if top_k <= 0:
        raise ValueError("top_k must be positive")
    A = np.asarray(desc2d, dtype=float)
    B = np.asarray(desc3d, dtype=float)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("descriptor sets must be 2-D arrays")
    ids2d = np.arange(len(A)) if ids2d is None else np.asarray(ids2d, dtype=np.int64)
    ids3d = np.arange(len(B)) if ids3d is None else np.asarray(ids3d, dtype=np.int64)
    if len(ids2d) != len(A) or len(ids3d) != len(B):
        raise ValueError("id arrays must align with descriptors")
    if len(A) == 0 or len(B) == 0:
        return []
    if A.shape[1] + B.shape[1] != matcher.feature_dim:
        raise ValueError(f"descriptor lengths {A.shape[1]}+{B.shape[1]} != {matcher.feature_dim}")
    k = min(top_k, len(B))
    rows, cols, probs = [], [], []
    for start in range(0, len(A), chunk):
        P = matcher.score_pairs(A[start:start + chunk], B)
        for r, p in enumerate(P):
            order = np.lexsort((ids3d, -p))[:k]
            order = order[p[order] >= tau]
            rows.extend([start + r] * len(order))
            cols.extend(order.tolist())
            probs.extend(p[order].tolist())
        if progress is not None:
            progress(min(start + chunk, len(A)), len(A))
    if not probs:
        return []
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    probs = np.asarray(probs)
    order = np.lexsort((ids3d[cols], ids2d[rows], -probs))
    if max_candidates is not None and len(order) > max_candidates:
        logger.info("candidate cap %d hit (%d candidates)", max_candidates, len(order))
        order = order[:max_candidates]
    return [MatchCandidate(int(ids2d[rows[i]]), int(ids3d[cols[i]]), float(probs[i])) for i in order]
