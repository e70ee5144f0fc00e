"""Dense point cloud container and per-point preprocessing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .spatial import SpatialIndex

logger = logging.getLogger(__name__)

# second eigenvalue below this fraction of the largest marks a rank < 2 neighbourhood
_DEGENERATE_RATIO = 1e-10


@dataclass(frozen=True)
class PointCloud:
    """Positions plus optional per-point attributes, all index-aligned.

    ``normal_valid`` is False where the normal could not be estimated; such
    points carry a zero normal.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    intensities: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None
    gradients: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point positions must be finite")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        for name, dtype, width in (("colors", np.uint8, 3), ("intensities", float, None),
                                   ("normals", float, 3), ("normal_valid", bool, None),
                                   ("gradients", float, 3)):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.asarray(val, dtype=dtype)
            arr = arr.reshape(-1, width) if width else arr.reshape(-1)
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")
            object.__setattr__(self, name, arr)
        if self.normals is not None and self.normal_valid is None:
            nn = np.linalg.norm(self.normals, axis=1)
            object.__setattr__(self, "normal_valid", np.abs(nn - 1) < 1e-6)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep) -> "PointCloud":
        """Cloud restricted to ``keep`` (bool mask or index array); attributes follow."""
        keep = np.asarray(keep)
        kw = {}
        for name in ("colors", "intensities", "normals", "normal_valid", "gradients"):
            val = getattr(self, name)
            kw[name] = None if val is None else val[keep]
        return PointCloud(self.points[keep], **kw)

    def transformed(self, R, t=np.zeros(3)) -> "PointCloud":
        """Rigidly moved copy; direction attributes rotate with the points."""
        R = np.asarray(R, dtype=float)
        return replace(
            self,
            points=self.points @ R.T + np.asarray(t, dtype=float),
            normals=None if self.normals is None else self.normals @ R.T,
            gradients=None if self.gradients is None else self.gradients @ R.T,
        )

    def index(self) -> SpatialIndex:
        return SpatialIndex(self.points)


def sor_filter(cloud: PointCloud, k: int = 16, stddev_mult: float = 1.0,
               index: Optional[SpatialIndex] = None):
    """Statistical outlier removal.

    Each point's mean distance to its k nearest neighbours is compared with
    the cloud-wide mean and (sample) standard deviation of that quantity;
    points beyond ``mean + stddev_mult * std`` are dropped.

    Returns ``(filtered_cloud, removed_indices)``.
    """
    n = len(cloud)
    if k < 1 or k >= n:
        raise ValueError(f"invalid SOR parameter: k={k} must be in [1, {n - 1}]")
    if not stddev_mult > 0:
        raise ValueError(f"invalid SOR parameter: stddev_mult={stddev_mult}")
    index = index or cloud.index()
    dist, _ = index.knn(cloud.points, k, exclude_self=True)
    mean_d = dist.mean(axis=1)
    mu = mean_d.mean()
    sigma = mean_d.std(ddof=1) if n > 1 else 0.0
    removed = np.nonzero(mean_d > mu + stddev_mult * sigma)[0]
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    logger.info("SOR removed %d of %d points", len(removed), n)
    return cloud.subset(keep), removed


def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=(0.0, 0.0, 0.0),
                     index: Optional[SpatialIndex] = None) -> PointCloud:
    """PCA normals from each point and its k nearest neighbours, oriented toward ``viewpoint``."""
    n = len(cloud)
    if k < 1 or k >= n:
        raise ValueError(f"need at least k+1={k + 1} points, have {n}")
    index = index or cloud.index()
    _, nbr = index.knn(cloud.points, k, exclude_self=True)
    nbr = np.concatenate([np.arange(n)[:, None], nbr], axis=1)
    P = cloud.points[nbr]
    P = P - P.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", P, P) / nbr.shape[1]
    w, V = np.linalg.eigh(cov)
    normals = V[:, :, 0].copy()
    valid = w[:, 1] > _DEGENERATE_RATIO * np.maximum(w[:, 2], 1e-300)
    to_view = np.asarray(viewpoint, dtype=float) - cloud.points
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    normals[~valid] = 0.0
    if not valid.all():
        logger.debug("%d points with degenerate neighbourhoods", int((~valid).sum()))
    return replace(cloud, normals=normals, normal_valid=valid)


def luma(colors) -> np.ndarray:
    c = np.asarray(colors, dtype=float)
    return (0.299 * c[:, 0] + 0.587 * c[:, 1] + 0.114 * c[:, 2]) / 255.0


def tangent_basis(normals: np.ndarray):
    """Two unit vectors spanning each normal's tangent plane."""
    n = np.asarray(normals, dtype=float)
    helper = np.where((np.abs(n[:, 0]) < 0.9)[:, None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


def intensity_and_gradient(cloud: PointCloud, k: int = 16,
                           index: Optional[SpatialIndex] = None) -> PointCloud:
    """Per-point intensity and its surface gradient.

    Intensity comes from ``cloud.intensities`` when present, otherwise the
    luma of the colors. The gradient is the least-squares linear fit of
    intensity over the point and its k neighbours, in tangent-plane
    coordinates, so it is perpendicular to the normal by construction.
    """
    if cloud.normals is None:
        raise ValueError("intensity gradients need normals; run estimate_normals first")
    if cloud.intensities is not None:
        inten = cloud.intensities
    elif cloud.colors is not None:
        inten = luma(cloud.colors)
    else:
        raise ValueError("intensity gradients need colors or intensities")
    n = len(cloud)
    if k < 2 or k >= n:
        raise ValueError(f"need 2 <= k < {n}")
    index = index or cloud.index()
    _, nbr = index.knn(cloud.points, k, exclude_self=True)
    nbr = np.concatenate([np.arange(n)[:, None], nbr], axis=1)

    valid = cloud.normal_valid if cloud.normal_valid is not None else np.ones(n, bool)
    normals = np.where(valid[:, None], cloud.normals, [0.0, 0.0, 1.0])
    e1, e2 = tangent_basis(normals)
    off = cloud.points[nbr] - cloud.points[:, None, :]
    A = np.stack([np.einsum("nkj,nj->nk", off, e1), np.einsum("nkj,nj->nk", off, e2),
                  np.ones(nbr.shape)], axis=2)
    # offsets from the centre value keep a constant field exactly zero
    b = inten[nbr] - inten[:, None]
    coef = np.einsum("nij,nj->ni", np.linalg.pinv(A), b)
    grad = coef[:, 0:1] * e1 + coef[:, 1:2] * e2
    grad[~valid] = 0.0
    return replace(cloud, intensities=np.asarray(inten, dtype=float), gradients=grad)
