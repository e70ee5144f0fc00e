"""3D keypoints (Harris on normals) and RIFT descriptors over a dense cloud."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .pointcloud import PointCloud
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)

HARRIS_K = 0.04
MIN_RIFT_NEIGHBORS = 5


@dataclass(frozen=True)
class Keypoints3D:
    positions: np.ndarray       # (K, 3)
    source_index: np.ndarray    # (K,) into the cloud
    saliency: np.ndarray        # (K,)

    def __len__(self) -> int:
        return len(self.source_index)

    @classmethod
    def from_indices(cls, cloud: PointCloud, idx, saliency=None) -> "Keypoints3D":
        idx = np.asarray(idx, dtype=np.int64)
        sal = np.zeros(len(idx)) if saliency is None else np.asarray(saliency, dtype=float)
        return cls(cloud.points[idx].copy(), idx, sal)


@dataclass(frozen=True)
class Descriptors3D:
    values: np.ndarray          # (K, distance_bins * gradient_bins)
    valid: np.ndarray           # (K,) False when too few neighbours
    low_energy: np.ndarray      # (K,) True when every bin is zero
    distance_bins: int
    gradient_bins: int

    @property
    def dim(self) -> int:
        return self.values.shape[1]


class Detector3D(Protocol):
    def __call__(self, cloud: PointCloud, index: SpatialIndex) -> Keypoints3D: ...


def default_radii(index: SpatialIndex, detector_mult: float = 6.0, descriptor_mult: float = 12.0):
    s = index.median_spacing()
    return detector_mult * s, descriptor_mult * s


def harris_response(cloud: PointCloud, index: SpatialIndex, radius: float) -> np.ndarray:
    """Harris response of the normal second-moment matrix in each point's radius neighbourhood.

    ``det(C) - k*trace(C)**2 + k`` with k = 0.04, matching PCL's HarrisKeypoint3D.
    For unit normals trace(C) == 1, so without the ``+ k`` offset the response
    could never be positive. NaN where fewer than three valid normals are in range.
    """
    if cloud.normals is None:
        raise ValueError("Harris detection needs normals")
    if not radius > 0:
        raise ValueError("radius must be positive")
    valid = cloud.normal_valid if cloud.normal_valid is not None else np.ones(len(cloud), bool)
    outer = np.einsum("ni,nj->nij", cloud.normals, cloud.normals)
    outer[~valid] = 0.0
    resp = np.full(len(cloud), np.nan)
    for i, nb in enumerate(index.radius_many(cloud.points, radius)):
        nb = nb[valid[nb]]
        if len(nb) < 3:
            continue
        C = outer[nb].sum(axis=0) / len(nb)
        tr = C[0, 0] + C[1, 1] + C[2, 2]
        resp[i] = np.linalg.det(C) - HARRIS_K * tr * tr + HARRIS_K
    return resp


def detect_harris3d(cloud: PointCloud, index: Optional[SpatialIndex] = None, radius: float = None,
                    threshold: float = 1e-4, nms_radius: float = None) -> Keypoints3D:
    """Harris keypoints: response above ``threshold`` and maximal within ``nms_radius``.

    Equal responses are resolved in favour of the smaller point index. The
    result is sorted by descending saliency.
    """
    if len(cloud) == 0:
        return Keypoints3D(np.empty((0, 3)), np.empty(0, np.int64), np.empty(0))
    index = index or cloud.index()
    if radius is None:
        radius = default_radii(index)[0]
    nms_radius = radius if nms_radius is None else nms_radius
    resp = harris_response(cloud, index, radius)
    cand = np.nonzero(np.nan_to_num(resp, nan=-np.inf) > threshold)[0]
    keep = []
    for i, nb in zip(cand, index.radius_many(cloud.points[cand], nms_radius)):
        r = resp[nb]
        r = np.nan_to_num(r, nan=-np.inf)
        ri = resp[i]
        if np.all((r < ri) | ((r == ri) & (nb >= i))):
            keep.append(i)
    keep = np.asarray(keep, dtype=np.int64)
    order = np.lexsort((keep, -resp[keep]))
    keep = keep[order]
    logger.info("Harris3D: %d keypoints from %d points", len(keep), len(cloud))
    return Keypoints3D(cloud.points[keep].copy(), keep, resp[keep])


def _soft_bins(x: np.ndarray, nbins: int):
    """Linear interpolation weights for x in [0, 1] onto bin centres; clamped at the ends."""
    pos = x * nbins - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64)
    hi = lo + 1
    w_lo = 1.0 - frac
    w_hi = frac
    w_lo = np.where(lo < 0, 0.0, w_lo)
    w_hi = np.where(hi > nbins - 1, 0.0, w_hi)
    w_hi = np.where(lo < 0, 1.0, w_hi)
    w_lo = np.where(hi > nbins - 1, 1.0, w_lo)
    return np.clip(lo, 0, nbins - 1), np.clip(hi, 0, nbins - 1), w_lo, w_hi


def rift_descriptor(p: np.ndarray, q: np.ndarray, grad: np.ndarray, normals: np.ndarray,
                    radius: float, distance_bins: int = 4, gradient_bins: int = 8) -> np.ndarray:
    """RIFT histogram of one keypoint from its neighbours' positions, gradients and normals."""
    hist = np.zeros((distance_bins, gradient_bins))
    off = q - p
    dist = np.linalg.norm(off, axis=1)
    keep = dist > 0
    off, dist, grad, normals = off[keep], dist[keep], grad[keep], normals[keep]
    # radial direction projected into each neighbour's tangent plane
    radial = off - np.einsum("ij,ij->i", off, normals)[:, None] * normals
    rn = np.linalg.norm(radial, axis=1)
    gn = np.linalg.norm(grad, axis=1)
    ok = (rn > 1e-12 * radius) & (gn > 0)
    if not ok.any():
        return hist.reshape(-1)
    cosang = np.einsum("ij,ij->i", grad[ok], radial[ok]) / (gn[ok] * rn[ok])
    theta = np.arccos(np.clip(cosang, -1.0, 1.0))
    d0, d1, wd0, wd1 = _soft_bins(np.minimum(dist[ok] / radius, 1.0), distance_bins)
    a0, a1, wa0, wa1 = _soft_bins(theta / math.pi, gradient_bins)
    mag = gn[ok]
    for di, wd in ((d0, wd0), (d1, wd1)):
        for ai, wa in ((a0, wa0), (a1, wa1)):
            np.add.at(hist, (di, ai), mag * wd * wa)
    rows = hist.sum(axis=1, keepdims=True)
    np.divide(hist, rows, out=hist, where=rows > 0)
    return hist.reshape(-1)


def extract_rift(cloud: PointCloud, keypoints: Keypoints3D, radius: float,
                 distance_bins: int = 4, gradient_bins: int = 8,
                 index: Optional[SpatialIndex] = None) -> Descriptors3D:
    """RIFT descriptors at each keypoint; rows are index-aligned with ``keypoints``."""
    if cloud.gradients is None or cloud.normals is None:
        raise ValueError("RIFT needs intensity gradients and normals")
    if not radius > 0:
        raise ValueError("radius must be positive")
    index = index or cloud.index()
    m = distance_bins * gradient_bins
    values = np.zeros((len(keypoints), m))
    valid = np.zeros(len(keypoints), dtype=bool)
    nbrs = index.radius_many(keypoints.positions, radius)
    for k, (src, nb) in enumerate(zip(keypoints.source_index, nbrs)):
        nb = nb[nb != src]
        if len(nb) < MIN_RIFT_NEIGHBORS:
            continue
        valid[k] = True
        values[k] = rift_descriptor(keypoints.positions[k], cloud.points[nb], cloud.gradients[nb],
                                    cloud.normals[nb], radius, distance_bins, gradient_bins)
    low = ~np.any(values > 0, axis=1)
    if (~valid).any():
        logger.info("RIFT: %d of %d keypoints have too few neighbours", int((~valid).sum()), len(valid))
    return Descriptors3D(values, valid, low, distance_bins, gradient_bins)
