"""Exact k-nearest-neighbour and radius queries over a static point set.

Tree traversal is delegated to ``scipy.spatial.cKDTree``; this wrapper pins
down the parts cKDTree leaves open so the results equal a brute-force scan:
neighbours are ordered by (distance, index), k-NN ties at the k-th distance
are resolved toward the smaller index, and radius queries use a strict
``distance < r`` test on recomputed distances.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_REL_SLACK = 1e-9


def _dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return np.sqrt(np.einsum("...j,...j->...", d, d))


class SpatialIndex:
    """Balanced kd-tree over an ``(N, 3)`` array. Immutable after construction."""

    def __init__(self, points):
        pts = np.array(points, dtype=float, copy=True)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-D array")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, queries, k: int, exclude_self: bool = False):
        """k nearest neighbours of each query row.

        With ``exclude_self`` the queries must be the indexed points themselves
        (same order) and each point's own index is skipped.

        Returns ``(dist, idx)`` of shape ``(M, k)``.
        """
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        n = len(self.points)
        avail = n - 1 if exclude_self else n
        if k < 1 or k > avail:
            raise ValueError(f"k={k} out of range for {n} points")
        if exclude_self and len(Q) != n:
            raise ValueError("exclude_self requires querying the indexed points")
        kq = min(k + (2 if exclude_self else 1), n)
        _, idx = self._tree.query(Q, k=kq)
        idx = idx.reshape(len(Q), kq)
        if exclude_self:
            own = idx == np.arange(len(Q))[:, None]
            # rows where self was not returned (duplicates) drop the last column instead
            drop = np.where(own.any(axis=1)[:, None], own, np.arange(kq)[None, :] == kq - 1)
            idx = idx[~drop].reshape(len(Q), kq - 1)
        dist = _dist(self.points[idx], Q[:, None, :])
        rows = np.broadcast_to(np.arange(len(Q))[:, None], idx.shape)
        order = np.lexsort((idx.ravel(), dist.ravel(), rows.ravel())).reshape(idx.shape) % idx.shape[1]
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        out_d = dist[:, :k].copy()
        out_i = idx[:, :k].copy()

        # the (k+1)-th candidate may tie with the k-th; widen those rows to every point at that distance
        if idx.shape[1] > k:
            tied = np.nonzero(dist[:, k] <= dist[:, k - 1] * (1 + _REL_SLACK))[0]
        else:
            tied = np.empty(0, dtype=np.int64)
        for row in tied:
            kth = dist[row, k - 1]
            cand = np.asarray(self._tree.query_ball_point(Q[row], kth * (1 + 1e-6) + 1e-12), dtype=np.int64)
            if exclude_self:
                cand = cand[cand != row]
            cd = _dist(self.points[cand], Q[row])
            o = np.lexsort((cand, cd))
            out_d[row] = cd[o][:k]
            out_i[row] = cand[o][:k]
        return out_d, out_i

    def radius(self, q, r: float) -> np.ndarray:
        """Indices with ``distance < r``, ascending by index."""
        if self._tree is None or r <= 0:
            return np.empty(0, dtype=np.int64)
        q = np.asarray(q, dtype=float)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9)), dtype=np.int64)
        if len(cand) == 0:
            return cand
        cand = cand[_dist(self.points[cand], q) < r]
        cand.sort()
        return cand

    def radius_many(self, queries, r: float) -> list[np.ndarray]:
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        if self._tree is None or r <= 0:
            return [np.empty(0, dtype=np.int64) for _ in range(len(Q))]
        lists = self._tree.query_ball_point(Q, r * (1 + 1e-9))
        out = []
        for q, cand in zip(Q, lists):
            cand = np.asarray(cand, dtype=np.int64)
            if len(cand):
                cand = cand[_dist(self.points[cand], q) < r]
                cand.sort()
            out.append(cand)
        return out

    def median_spacing(self) -> float:
        """Median distance from each point to its nearest other point."""
        if len(self.points) < 2:
            raise ValueError("need at least two points")
        d, _ = self._tree.query(self.points, k=2)
        return float(np.median(d[:, 1]))
